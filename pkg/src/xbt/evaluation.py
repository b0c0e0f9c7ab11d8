"""Retrieval metrics and compatibility verdicts.

Recall@K runs in both query directions; the strict per-pair distance
constraints and the relaxed recall criterion decide whether a new model's
embeddings may be used against the old model's gallery without backfilling.
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels

DEFAULT_KS = (1, 5, 10, 50)
STRICT_PAIR_CAP = 1_000_000

REPORT_SCHEMA_VERSION = 1


@dataclass
class RetrievalCase:
    """A query/gallery matrix pair; positives[i] lists the gallery rows that
    count as hits for query row i."""

    name: str
    query: np.ndarray
    gallery: np.ndarray
    positives: list[np.ndarray]

    def __post_init__(self):
        if len(self.positives) != self.query.shape[0]:
            raise ValueError("one positives list per query row required")


def text_to_image_case(name: str, captions: np.ndarray, images: np.ndarray,
                       pair_of: np.ndarray) -> RetrievalCase:
    """Each caption has exactly one relevant image."""
    if pair_of.shape[0] != captions.shape[0]:
        raise ValueError("pair_of must have one entry per caption")
    positives = [np.array([p], dtype=np.int64) for p in pair_of]
    return RetrievalCase(name, captions, images, positives)


def image_to_text_case(name: str, images: np.ndarray, captions: np.ndarray,
                       pair_of: np.ndarray) -> RetrievalCase:
    """An image query hits if any of its captions is retrieved."""
    positives = [np.nonzero(pair_of == i)[0].astype(np.int64)
                 for i in range(images.shape[0])]
    return RetrievalCase(name, images, captions, positives)


def recall_at_k(case: RetrievalCase, ks) -> dict[int, float]:
    """Percentage of queries whose first relevant item ranks within K."""
    ks = list(ks)
    if ks != sorted(ks):
        raise ValueError("ks must be sorted ascending")
    if ks[-1] > case.gallery.shape[0]:
        raise ValueError(f"K={ks[-1]} exceeds gallery size {case.gallery.shape[0]}")
    for i, pos in enumerate(case.positives):
        if pos.size and (pos.min() < 0 or pos.max() >= case.gallery.shape[0]):
            raise ValueError(f"relevance index out of range for query {i}")
    sims = kernels.cosine_similarity(case.query, case.gallery)
    top = kernels.top_k(sims, ks[-1])
    n = case.query.shape[0]
    first_hit = np.full(n, np.iinfo(np.int64).max, dtype=np.int64)
    for i in range(n):
        where = np.nonzero(np.isin(top[i], case.positives[i]))[0]
        if where.size:
            first_hit[i] = where[0]
    return {k: float(100.0 * np.mean(first_hit < k)) for k in ks}


def strict_constraint_fraction(
    w_new: np.ndarray, v_new: np.ndarray, w_old: np.ndarray, v_old: np.ndarray,
    pair_of: np.ndarray, max_pairs: int = STRICT_PAIR_CAP, seed: int = 0,
) -> dict[str, float]:
    """Fraction of pairs satisfying each of the four per-pair distance
    constraints (cosine distance, non-strict inequalities).

    Paired fractions are exact; the O(n_cap * n_img) unpaired families fall
    back to a seeded subsample above max_pairs.
    """
    n_cap, n_img = w_new.shape[0], v_new.shape[0]
    if w_old.shape[0] != n_cap or v_old.shape[0] != n_img or pair_of.shape[0] != n_cap:
        raise ValueError("misaligned inputs")

    def row_dist(a, rows_a, b, rows_b):
        return 1.0 - np.sum(a[rows_a] * b[rows_b], axis=1, dtype=np.float64)

    caps = np.arange(n_cap)
    # paired pairs, enumerated exactly: caption i with its image pair_of[i]
    text_paired = float(np.mean(
        row_dist(w_new, caps, v_old, pair_of) <= row_dist(w_old, caps, v_old, pair_of)))
    image_paired = float(np.mean(
        row_dist(v_new, pair_of, w_old, caps) <= row_dist(v_old, pair_of, w_old, caps)))

    total = n_cap * n_img
    if total <= max_pairs:
        d_new = 1.0 - kernels.cosine_similarity(w_new, v_old).astype(np.float64)
        d_old = 1.0 - kernels.cosine_similarity(w_old, v_old).astype(np.float64)
        unpaired = np.ones((n_cap, n_img), dtype=bool)
        unpaired[caps, pair_of] = False
        text_unpaired = float(np.mean((d_new >= d_old)[unpaired]))
        d3_new = 1.0 - kernels.cosine_similarity(v_new, w_old).astype(np.float64)
        d3_old = 1.0 - kernels.cosine_similarity(v_old, w_old).astype(np.float64)
        unpaired_it = np.ones((n_img, n_cap), dtype=bool)
        unpaired_it[pair_of, caps] = False
        image_unpaired = float(np.mean((d3_new >= d3_old)[unpaired_it]))
    else:
        rng = np.random.default_rng(seed)
        ci = rng.integers(n_cap, size=max_pairs)
        ii = rng.integers(n_img, size=max_pairs)
        keep = pair_of[ci] != ii
        ci, ii = ci[keep], ii[keep]
        text_unpaired = float(np.mean(
            row_dist(w_new, ci, v_old, ii) >= row_dist(w_old, ci, v_old, ii)))
        image_unpaired = float(np.mean(
            row_dist(v_new, ii, w_old, ci) >= row_dist(v_old, ii, w_old, ci)))

    return {
        "text_paired": text_paired,
        "text_unpaired": text_unpaired,
        "image_paired": image_paired,
        "image_unpaired": image_unpaired,
    }


def eq2_criterion(new_cross: dict[int, float], old_self: dict[int, float]) -> dict[int, bool]:
    """True per K iff querying the old gallery with the new model's
    embeddings strictly beats the old model's own recall."""
    if sorted(new_cross) != sorted(old_self):
        raise ValueError("mismatched K lists")
    return {k: bool(new_cross[k] > old_self[k]) for k in sorted(new_cross)}


def zero_shot_classify(image_emb: np.ndarray, class_emb: np.ndarray, labels) -> float:
    """Prototype classification: nearest class embedding by cosine, ties to
    the lower class index. Returns accuracy in percent."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape[0] != image_emb.shape[0]:
        raise ValueError("one label per image required")
    if labels.size and (labels.min() < 0 or labels.max() >= class_emb.shape[0]):
        raise ValueError("label out of range")
    sims = kernels.cosine_similarity(image_emb, class_emb)
    pred = kernels.top_k(sims, 1)[:, 0]
    return float(100.0 * np.mean(pred == labels))


@dataclass
class RetrievalReport:
    """All retrieval cases plus the two compatibility verdicts."""

    recalls: dict[str, dict[int, float]]
    strict_fraction: dict[str, float]
    eq2_verdicts: dict[str, dict[int, bool]]
    ks: list[int] = field(default_factory=lambda: list(DEFAULT_KS))

    def to_json_dict(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "ks": self.ks,
            "recalls": {name: {str(k): v for k, v in r.items()}
                        for name, r in self.recalls.items()},
            "strict_fraction": self.strict_fraction,
            "eq2_verdicts": {d: {str(k): v for k, v in ver.items()}
                             for d, ver in self.eq2_verdicts.items()},
        }


def build_report(
    w_old: np.ndarray, v_old: np.ndarray,
    w_new_raw: np.ndarray, v_new_raw: np.ndarray,
    w_bar: np.ndarray, v_bar: np.ndarray,
    pair_of: np.ndarray,
    ks=DEFAULT_KS,
    strict_cap: int = STRICT_PAIR_CAP,
    strict_seed: int = 0,
) -> RetrievalReport:
    """Evaluate every case of the compatibility protocol on one eval split.

    w/v are text/image embeddings; *_bar are the backward-compatible
    (adapter + projection) outputs of the new model.
    """
    ks = list(ks)
    cases = [
        text_to_image_case("w_old/v_old", w_old, v_old, pair_of),
        image_to_text_case("v_old/w_old", v_old, w_old, pair_of),
        text_to_image_case("w_new/v_new", w_new_raw, v_new_raw, pair_of),
        image_to_text_case("v_new/w_new", v_new_raw, w_new_raw, pair_of),
        text_to_image_case("wbar_new/v_old", w_bar, v_old, pair_of),
        image_to_text_case("vbar_new/w_old", v_bar, w_old, pair_of),
        text_to_image_case("wbar_new/vbar_new", w_bar, v_bar, pair_of),
        image_to_text_case("vbar_new/wbar_new", v_bar, w_bar, pair_of),
    ]
    recalls = {c.name: recall_at_k(c, ks) for c in cases}
    strict = strict_constraint_fraction(
        w_bar, v_bar, w_old, v_old, pair_of, max_pairs=strict_cap, seed=strict_seed)
    verdicts = {
        "text_query": eq2_criterion(recalls["wbar_new/v_old"], recalls["w_old/v_old"]),
        "image_query": eq2_criterion(recalls["vbar_new/w_old"], recalls["v_old/w_old"]),
    }
    return RetrievalReport(recalls=recalls, strict_fraction=strict,
                           eq2_verdicts=verdicts, ks=ks)


def report_csv(report: RetrievalReport, extra: dict[str, str] | None = None) -> str:
    """Aligned-column CSV rendering of a report, for humans."""
    ks = report.ks
    rows = [["case"] + [f"R@{k}" for k in ks]]
    for name, rec in report.recalls.items():
        rows.append([name] + [f"{rec[k]:.2f}" for k in ks])
    for fam, frac in report.strict_fraction.items():
        rows.append([f"strict:{fam}", f"{frac:.4f}"] + [""] * (len(ks) - 1))
    for direction, verdict in report.eq2_verdicts.items():
        rows.append([f"eq2:{direction}"] + [str(verdict[k]) for k in ks])
    if extra:
        for key, val in extra.items():
            rows.append([key, val] + [""] * (len(ks) - 1))
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "\n".join(
        ", ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip()
        for row in rows
    ) + "\n"
