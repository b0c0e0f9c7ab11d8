"""Command-line surface: synthetic data generation, both training stages,
the direct baselines, evaluation, and ablation sweeps, all driven by a
JSON config.

Exit codes: 0 ok, 2 config error, 3 I/O or file-format error, 4 numeric
failure (non-finite loss). All file writes are atomic.
"""

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, effective_config, load_run_config
from .data import (
    FormatError,
    PairedDataset,
    SynthResult,
    _atomic_write,
    read_embeddings,
    read_pairing,
    synth_generate,
    write_embeddings,
    write_pairing,
)
from .evaluation import RetrievalReport, build_report, report_csv
from .training import (
    NonFiniteLossError,
    TrainLog,
    load_checkpoint,
    project_embeddings,
    run_direct,
    run_text_pretrain,
    run_xbt,
    save_checkpoint,
)

# file layout written by gen-synth and consumed by the training commands
EMBED_FILES = {
    "pretrain_text_old": "pretrain_text_old.xbte",
    "pretrain_text_new": "pretrain_text_new.xbte",
    "train_image_old": "train_image_old.xbte",
    "train_text_old": "train_text_old.xbte",
    "train_image_new": "train_image_new.xbte",
    "train_text_new": "train_text_new.xbte",
    "eval_image_old": "eval_image_old.xbte",
    "eval_text_old": "eval_text_old.xbte",
    "eval_image_new": "eval_image_new.xbte",
    "eval_text_new": "eval_text_new.xbte",
}
PAIRING_FILES = {"train": "train_pairs.json", "eval": "eval_pairs.json"}


def _read_matrix(data_dir: str, key: str) -> np.ndarray:
    return read_embeddings(os.path.join(data_dir, EMBED_FILES[key]))[0]


def _read_pairs(data_dir: str, split: str, generation: str) -> PairedDataset:
    pair_of = read_pairing(os.path.join(data_dir, PAIRING_FILES[split]))
    return PairedDataset(
        image_emb=_read_matrix(data_dir, f"{split}_image_{generation}"),
        text_emb=_read_matrix(data_dir, f"{split}_text_{generation}"),
        pair_of=pair_of,
    )


def _write_log(out_path: str, logs: list[TrainLog]) -> None:
    """Training log as JSON-lines next to the checkpoint. The wall_clock
    record is the only non-deterministic line."""
    lines = []
    for log in logs:
        for step, loss in enumerate(log.losses):
            lines.append(json.dumps({"stage": log.stage, "step": step, "loss": loss}))
        lines.append(json.dumps(
            {"stage": log.stage, "param_checksums": log.param_checksums}, sort_keys=True))
        lines.append(json.dumps({"stage": log.stage, "wall_clock": log.wall_clock}))
    _atomic_write(out_path, ("\n".join(lines) + "\n").encode())


def _write_report(path: str, report: RetrievalReport, rc: RunConfig, meta: dict) -> None:
    doc = report.to_json_dict()
    doc["toolkit_version"] = __version__
    doc["config"] = effective_config(rc)
    doc.update(meta)
    _atomic_write(path, json.dumps(doc, sort_keys=True, indent=2).encode() + b"\n")
    csv_path = os.path.splitext(path)[0] + ".csv"
    extra = {"toolkit_version": __version__}
    extra.update({k: str(v) for k, v in meta.items()})
    _atomic_write(csv_path, report_csv(report, extra).encode())


def cmd_gen_synth(args) -> int:
    rc = load_run_config(args.config)
    os.makedirs(args.out, exist_ok=True)
    result = synth_generate(rc.synth)
    _write_synth(args.out, result)
    print(f"wrote {len(EMBED_FILES)} embedding files and {len(PAIRING_FILES)} "
          f"pairing files to {args.out}")
    return 0


def _write_synth(out_dir: str, result: SynthResult) -> None:
    mats = {
        "pretrain_text_old": result.pretrain_old,
        "pretrain_text_new": result.pretrain_new,
        "train_image_old": result.train_old.image_emb,
        "train_text_old": result.train_old.text_emb,
        "train_image_new": result.train_new.image_emb,
        "train_text_new": result.train_new.text_emb,
        "eval_image_old": result.eval_old.image_emb,
        "eval_text_old": result.eval_old.text_emb,
        "eval_image_new": result.eval_new.image_emb,
        "eval_text_new": result.eval_new.text_emb,
    }
    for key, m in mats.items():
        write_embeddings(os.path.join(out_dir, EMBED_FILES[key]), m)
    write_pairing(os.path.join(out_dir, PAIRING_FILES["train"]), result.train_new.pair_of)
    write_pairing(os.path.join(out_dir, PAIRING_FILES["eval"]), result.eval_new.pair_of)


def cmd_pretrain(args) -> int:
    rc = load_run_config(args.config)
    data_dir = args.data or rc.paths.data_dir
    if not data_dir:
        raise ConfigError("pretrain needs --data or paths.data_dir")
    w_new = _read_matrix(data_dir, "pretrain_text_new")
    w_old = _read_matrix(data_dir, "pretrain_text_old")
    phi, log = run_text_pretrain(rc.train, w_new, w_old)
    save_checkpoint(args.out, "pretrain", rc.train, phi, optimizer=log.optimizer)
    _write_log(args.out + ".log.jsonl", [log])
    print(f"pretrain: {len(log.losses)} steps, final loss {log.losses[-1]:.4f}"
          if log.losses else "pretrain: 0 steps")
    return 0


def cmd_train_xbt(args) -> int:
    rc = load_run_config(args.config)
    phi_path = args.phi or rc.paths.phi_checkpoint
    if not phi_path:
        raise ConfigError("train-xbt requires a pretrained projection (--phi checkpoint)")
    data_dir = args.data or rc.paths.data_dir
    if not data_dir:
        raise ConfigError("train-xbt needs --data or paths.data_dir")
    ckpt = load_checkpoint(phi_path)
    pairs = _read_pairs(data_dir, "train", "new")
    phi, adapters, log = run_xbt(rc.train, ckpt.phi, pairs)
    save_checkpoint(args.out, "xbt", rc.train, phi, adapters=adapters,
                    optimizer=log.optimizer)
    _write_log(args.out + ".log.jsonl", [log])
    print(f"xbt: {len(log.losses)} steps, final loss {log.losses[-1]:.4f}"
          if log.losses else "xbt: 0 steps")
    return 0


def cmd_train_direct(args) -> int:
    rc = load_run_config(args.config)
    data_dir = args.data or rc.paths.data_dir
    if not data_dir:
        raise ConfigError("train-direct needs --data or paths.data_dir")
    pairs_new = _read_pairs(data_dir, "train", "new")
    pairs_old = _read_pairs(data_dir, "train", "old")
    phi, adapters, log = run_direct(rc.train, pairs_new, pairs_old, args.policy)
    save_checkpoint(args.out, f"direct:{args.policy}", rc.train, phi,
                    adapters=adapters, optimizer=log.optimizer)
    _write_log(args.out + ".log.jsonl", [log])
    print(f"direct:{args.policy}: {len(log.losses)} steps, final loss "
          f"{log.losses[-1]:.4f}" if log.losses else "direct: 0 steps")
    return 0


def cmd_eval(args) -> int:
    rc = load_run_config(args.config)
    data_dir = args.data or rc.paths.data_dir
    if not data_dir:
        raise ConfigError("eval needs --data or paths.data_dir")
    ckpt_path = args.ckpt or rc.paths.checkpoint
    if not ckpt_path:
        raise ConfigError("eval needs --ckpt or paths.checkpoint")
    ckpt = load_checkpoint(ckpt_path)
    eval_new = _read_pairs(data_dir, "eval", "new")
    eval_old = _read_pairs(data_dir, "eval", "old")
    ad_img = ckpt.adapters[0] if ckpt.adapters else None
    ad_txt = ckpt.adapters[1] if ckpt.adapters else None
    v_bar = project_embeddings(ckpt.phi, ad_img, eval_new.image_emb)
    w_bar = project_embeddings(ckpt.phi, ad_txt, eval_new.text_emb)
    report = build_report(
        w_old=eval_old.text_emb, v_old=eval_old.image_emb,
        w_new_raw=eval_new.text_emb, v_new_raw=eval_new.image_emb,
        w_bar=w_bar, v_bar=v_bar, pair_of=eval_new.pair_of,
        ks=rc.eval.ks, strict_cap=rc.eval.strict_pair_cap, strict_seed=rc.eval.strict_seed)
    _write_report(args.out, report, rc, {"checkpoint_stage": ckpt.stage})
    for direction, verdict in report.eq2_verdicts.items():
        print(f"eq2 {direction}: " + ", ".join(f"R@{k}={'ok' if v else 'no'}"
                                               for k, v in verdict.items()))
    return 0


SWEEPABLE = ("sigma", "n_pretrain_texts", "n_pairs")


def _parse_sweep(sweep: str):
    if "=" not in sweep:
        raise ConfigError("--sweep must look like param=v1,v2,...")
    param, _, values = sweep.partition("=")
    param = param.strip()
    if param not in SWEEPABLE:
        raise ConfigError(f"sweepable parameters are {SWEEPABLE}, got {param!r}")
    cast = float if param == "sigma" else int
    try:
        parsed = [cast(v) for v in values.split(",") if v.strip() != ""]
    except ValueError as e:
        raise ConfigError(f"bad sweep value in {values!r}: {e}") from e
    if not parsed:
        raise ConfigError("sweep needs at least one value")
    return param, parsed


def _parse_seeds(spec: str) -> list[int]:
    try:
        if ".." in spec:
            lo, _, hi = spec.partition("..")
            return list(range(int(lo), int(hi) + 1))
        return [int(s) for s in spec.split(",")]
    except ValueError as e:
        raise ConfigError(f"bad --seeds {spec!r}: {e}") from e


def _pipeline_report(rc: RunConfig) -> RetrievalReport:
    """gen-synth + pretrain + xbt + eval, in memory."""
    result = synth_generate(rc.synth)
    phi, _ = run_text_pretrain(rc.train, result.pretrain_new, result.pretrain_old)
    phi, adapters, _ = run_xbt(rc.train, phi, result.train_new)
    v_bar = project_embeddings(phi, adapters[0], result.eval_new.image_emb)
    w_bar = project_embeddings(phi, adapters[1], result.eval_new.text_emb)
    return build_report(
        w_old=result.eval_old.text_emb, v_old=result.eval_old.image_emb,
        w_new_raw=result.eval_new.text_emb, v_new_raw=result.eval_new.image_emb,
        w_bar=w_bar, v_bar=v_bar, pair_of=result.eval_new.pair_of,
        ks=rc.eval.ks, strict_cap=rc.eval.strict_pair_cap, strict_seed=rc.eval.strict_seed)


def cmd_ablate(args) -> int:
    rc = load_run_config(args.config)
    param, values = _parse_sweep(args.sweep)
    seeds = _parse_seeds(args.seeds)
    os.makedirs(args.out, exist_ok=True)
    summary_rows = []
    for value in values:
        per_seed = []
        for seed in seeds:
            synth = dataclasses.replace(rc.synth, seed=seed)
            train = dataclasses.replace(rc.train, seed=seed)
            if param == "sigma":
                train = dataclasses.replace(train, sigma=value)
            else:
                synth = dataclasses.replace(synth, **{param: value})
            sub = RunConfig(train=train, synth=synth, eval=rc.eval, paths=rc.paths)
            report = _pipeline_report(sub)
            run_dir = os.path.join(args.out, f"{param}_{value}", f"seed_{seed}")
            os.makedirs(run_dir, exist_ok=True)
            _write_report(os.path.join(run_dir, "report.json"), report, sub,
                          {"sweep": {"param": param, "value": value, "seed": seed}})
            per_seed.append(report)
        summary_rows.append({
            "param": param,
            "value": value,
            "mean_cross_r1_text": float(np.mean(
                [r.recalls["wbar_new/v_old"][1] for r in per_seed])),
            "mean_cross_r1_image": float(np.mean(
                [r.recalls["vbar_new/w_old"][1] for r in per_seed])),
            "seeds": seeds,
        })
    _atomic_write(os.path.join(args.out, "summary.json"),
                  json.dumps({"sweep": summary_rows}, sort_keys=True, indent=2).encode())
    header = ["setting", "mean_cross_R@1_text", "mean_cross_R@1_image"]
    lines = [header] + [
        [f"{row['param']}={row['value']}", f"{row['mean_cross_r1_text']:.2f}",
         f"{row['mean_cross_r1_image']:.2f}"] for row in summary_rows]
    widths = [max(len(r[i]) for r in lines) for i in range(3)]
    csv = "\n".join(", ".join(c.ljust(widths[i]) for i, c in enumerate(row)).rstrip()
                    for row in lines) + "\n"
    _atomic_write(os.path.join(args.out, "summary.csv"), csv.encode())
    for row in summary_rows:
        print(f"{row['param']}={row['value']}: cross R@1 "
              f"text={row['mean_cross_r1_text']:.2f} image={row['mean_cross_r1_image']:.2f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="xbt",
        description="Backward-compatible embedding training and evaluation toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="generate the synthetic embedding corpus")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("pretrain", help="text-only pretraining of the projection")
    p.add_argument("--config", required=True)
    p.add_argument("--data", help="directory written by gen-synth")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train-xbt", help="cross-modal fine-tuning (LN-only + adapters)")
    p.add_argument("--config", required=True)
    p.add_argument("--data")
    p.add_argument("--phi", help="pretrain-stage checkpoint")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_xbt)

    p = sub.add_parser("train-direct", help="direct-backward baseline training")
    p.add_argument("--config", required=True)
    p.add_argument("--data")
    p.add_argument("--policy", required=True, choices=["full_tune", "lora_only", "base"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_direct)

    p = sub.add_parser("eval", help="retrieval cases, strict fractions, verdicts")
    p.add_argument("--config", required=True)
    p.add_argument("--ckpt")
    p.add_argument("--data")
    p.add_argument("--out", required=True, help="report JSON path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="sweep one parameter over several seeds")
    p.add_argument("--config", required=True)
    p.add_argument("--sweep", required=True, help="e.g. sigma=0,0.05,0.1,0.2")
    p.add_argument("--seeds", default="0", help="e.g. 0..4 or 0,1,2")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except FormatError as e:
        print(f"format error: {e}", file=sys.stderr)
        return 3
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 3
    except NonFiniteLossError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 4
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
