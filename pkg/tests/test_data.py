import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xbt import data, evaluation
from xbt.data import (
    FormatError,
    GenerationSpec,
    PairedDataset,
    SyntheticSpec,
    batch_iter,
    generate_generations,
    read_embeddings,
    read_pairing,
    synth_generate,
    write_embeddings,
    write_pairing,
)

SMALL = SyntheticSpec(n_pretrain_texts=800, n_pairs=300, n_eval_images=150, seed=0)


class TestEmbeddingFile:
    def test_round_trip_bitwise(self, tmp_path):
        rng = np.random.default_rng(0)
        m = rng.standard_normal((10, 8)).astype(np.float32)
        path = str(tmp_path / "m.xbte")
        write_embeddings(path, m, ids=[f"s{i}" for i in range(10)])
        back, ids = read_embeddings(path)
        assert np.array_equal(back, m)
        assert ids == [f"s{i}" for i in range(10)]

    def test_no_ids_sidecar(self, tmp_path):
        path = str(tmp_path / "m.xbte")
        write_embeddings(path, np.zeros((2, 3), dtype=np.float32))
        _, ids = read_embeddings(path)
        assert ids is None

    def test_truncated_payload_names_byte_counts(self, tmp_path):
        path = str(tmp_path / "m.xbte")
        write_embeddings(path, np.ones((4, 4), dtype=np.float32))
        blob = open(path, "rb").read()
        open(path, "wb").write(blob[:-8])
        with pytest.raises(FormatError, match=r"expected 64 bytes, got 56"):
            read_embeddings(path)

    def test_bad_magic(self, tmp_path):
        path = str(tmp_path / "m.xbte")
        write_embeddings(path, np.ones((1, 2), dtype=np.float32))
        blob = bytearray(open(path, "rb").read())
        blob[:4] = b"NOPE"
        open(path, "wb").write(bytes(blob))
        with pytest.raises(FormatError, match="bad magic"):
            read_embeddings(path)

    def test_bad_version_and_dtype(self, tmp_path):
        path = str(tmp_path / "m.xbte")
        m = np.ones((1, 2), dtype=np.float32)
        header = struct.pack("<4sIBBIQ", b"XBTE", 9, 0, 0, 2, 1)
        open(path, "wb").write(header + m.tobytes())
        with pytest.raises(FormatError, match="version"):
            read_embeddings(path)
        header = struct.pack("<4sIBBIQ", b"XBTE", 1, 7, 0, 2, 1)
        open(path, "wb").write(header + m.tobytes())
        with pytest.raises(FormatError, match="dtype"):
            read_embeddings(path)

    def test_normalized_flag_validated_on_load(self, tmp_path):
        path = str(tmp_path / "m.xbte")
        m = np.full((3, 4), 2.0, dtype=np.float32)  # row norms 4.0
        write_embeddings(path, m, normalized=True)
        with pytest.raises(FormatError, match="normalized flag"):
            read_embeddings(path)

    def test_normalized_flag_auto_detection(self, tmp_path):
        path = str(tmp_path / "m.xbte")
        rng = np.random.default_rng(1)
        m = rng.standard_normal((5, 6)).astype(np.float32)
        m /= np.linalg.norm(m, axis=1, keepdims=True)
        write_embeddings(path, m)
        flags = open(path, "rb").read()[9]
        assert flags & data.FLAG_NORMALIZED

    def test_rejects_non_float32(self, tmp_path):
        with pytest.raises(ValueError, match="float32"):
            write_embeddings(str(tmp_path / "m.xbte"), np.zeros((1, 2), dtype=np.float64))

    def test_id_count_mismatch(self, tmp_path):
        with pytest.raises(ValueError):
            write_embeddings(str(tmp_path / "m.xbte"),
                             np.zeros((2, 2), dtype=np.float32), ids=["a"])


class TestPairing:
    def test_round_trip(self, tmp_path):
        path = str(tmp_path / "p.json")
        write_pairing(path, np.array([0, 0, 1, 2]))
        assert read_pairing(path).tolist() == [0, 0, 1, 2]

    def test_missing_key(self, tmp_path):
        path = str(tmp_path / "p.json")
        open(path, "w").write(json.dumps({"nope": []}))
        with pytest.raises(FormatError, match="pair_of"):
            read_pairing(path)

    def test_dataset_validation(self):
        img = np.zeros((2, 4), dtype=np.float32)
        txt = np.zeros((3, 4), dtype=np.float32)
        with pytest.raises(ValueError, match="out of range"):
            PairedDataset(img, txt, np.array([0, 1, 2]))
        with pytest.raises(ValueError, match="one entry per caption"):
            PairedDataset(img, txt, np.array([0, 1]))


class TestSynth:
    def test_deterministic_per_spec(self):
        a = synth_generate(SMALL)
        b = synth_generate(SMALL)
        assert np.array_equal(a.pretrain_new, b.pretrain_new)
        assert np.array_equal(a.eval_old.image_emb, b.eval_old.image_emb)
        assert np.array_equal(a.train_new.pair_of, b.train_new.pair_of)

    def test_seeds_differ(self):
        a = synth_generate(SMALL)
        b = synth_generate(SyntheticSpec(**{**SMALL.__dict__, "seed": 1}))
        assert not np.array_equal(a.pretrain_new, b.pretrain_new)

    def test_degenerate_generations_coincide(self):
        # equal dims, equal injected text maps, zero noise -> identical texts
        spec = SyntheticSpec(n_pretrain_texts=100, n_pairs=50, n_eval_images=20,
                             d_old=48, d_new=48, seed=3)
        shared = np.random.default_rng(9).standard_normal(
            (48, spec.latent_dim)).astype(np.float32) * 0.05
        gens = [GenerationSpec("old", 48, 0.0), GenerationSpec("new", 48, 0.0)]
        out = generate_generations(spec, gens, maps={"old.text": shared, "new.text": shared})
        assert np.array_equal(out["old"].pretrain_text, out["new"].pretrain_text)
        assert np.array_equal(out["old"].train.text_emb, out["new"].train.text_emb)

    def test_outputs_row_normalized(self):
        res = synth_generate(SMALL)
        for m in (res.pretrain_new, res.pretrain_old, res.train_new.image_emb,
                  res.eval_old.text_emb):
            assert np.abs(np.linalg.norm(m, axis=1) - 1.0).max() < 1e-6

    def test_pairing_structure(self):
        res = synth_generate(SMALL)
        assert res.train_new.pair_of.tolist() == list(range(SMALL.n_pairs))
        expected = np.repeat(np.arange(SMALL.n_eval_images), SMALL.captions_per_image)
        assert np.array_equal(res.eval_new.pair_of, expected)
        assert np.array_equal(res.eval_old.pair_of, res.eval_new.pair_of)

    def test_paired_similarity_exceeds_unpaired(self):
        res = synth_generate(SMALL)
        for ds in (res.eval_old, res.eval_new):
            sims = ds.text_emb @ ds.image_emb.T
            paired = sims[np.arange(ds.n_captions), ds.pair_of]
            mask = np.ones_like(sims, dtype=bool)
            mask[np.arange(ds.n_captions), ds.pair_of] = False
            assert paired.mean() > sims[mask].mean()

    def test_new_model_beats_old_at_r1(self):
        res = synth_generate(SMALL)
        ks = [1]

        def r1(ds):
            case = evaluation.text_to_image_case("x", ds.text_emb, ds.image_emb, ds.pair_of)
            return evaluation.recall_at_k(case, ks)[1]

        assert r1(res.eval_new) > r1(res.eval_old)

    def test_invariant_validation(self):
        with pytest.raises(ValueError, match="new_noise"):
            SyntheticSpec(old_noise=0.1, new_noise=0.2)
        with pytest.raises(ValueError, match=">= 1"):
            SyntheticSpec(n_pairs=0)

    def test_map_shape_validation(self):
        spec = SyntheticSpec(n_pretrain_texts=10, n_pairs=5, n_eval_images=5)
        with pytest.raises(ValueError, match="shape"):
            generate_generations(spec, [GenerationSpec("old", 64, 0.1)],
                                 maps={"old.text": np.zeros((3, 3), dtype=np.float32)})


class TestBatchIter:
    def test_sequential_no_shuffle(self):
        batches = [b.tolist() for b in batch_iter(5, 2, seed=0, shuffle=False)]
        assert batches == [[0, 1], [2, 3], [4]]

    @settings(deadline=None, max_examples=25)
    @given(st.integers(0, 64), st.integers(1, 17), st.integers(0, 2**31 - 1))
    def test_partition_property(self, n, bs, seed):
        seen = np.concatenate([b for b in batch_iter(n, bs, seed=seed)]) if n else []
        assert sorted(seen) == list(range(n))

    def test_seed_controls_permutation(self):
        a = np.concatenate(list(batch_iter(32, 8, seed=5)))
        b = np.concatenate(list(batch_iter(32, 8, seed=5)))
        c = np.concatenate(list(batch_iter(32, 8, seed=6)))
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_batch_size_validation(self):
        with pytest.raises(ValueError):
            list(batch_iter(4, 0, seed=0))
