import json
import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sleepcmt.dataset import (
    EPOCH_SAMPLES,
    EpochSample,
    PreprocessConfig,
    build_sequences,
    load_processed,
    preprocess_manifest,
    preprocess_recording,
    recording_from_arrays,
    segment_epochs,
    sequence_arrays,
    subject_independent_folds,
    write_manifest,
)
from sleepcmt.errors import ConfigError, IntegrityError, InputError
from sleepcmt.signal import DISCARD, STAGES
from sleepcmt.synthetic import synthetic_recording


def samples(n, start=0, skip=()):
    return [EpochSample(np.zeros((EPOCH_SAMPLES, 1)), 0, "s", k) for k in range(start, start + n) if k not in skip]


class TestSegmentation:
    def test_discards_are_dropped(self):
        labels = ["N2"] * 300
        for k in range(0, 300, 25):
            labels[k] = DISCARD
        sig = np.zeros((300 * EPOCH_SAMPLES, 1))
        assert len(segment_epochs(sig, labels, (0, 299))) == 288

    def test_indexing_contract(self):
        sig = np.arange(4 * EPOCH_SAMPLES, dtype=np.float64)[:, None]
        out = segment_epochs(sig, ["W", "N1", "N2", "N3"], (1, 3))
        assert [e.epoch_index for e in out] == [1, 2, 3]
        for e in out:
            assert e.signals[17, 0] == e.epoch_index * EPOCH_SAMPLES + 17

    def test_short_signal_rejected(self):
        with pytest.raises(IntegrityError):
            segment_epochs(np.zeros((5000, 1)), ["W", "W"], (0, 1))


class TestSequences:
    def test_training_windows(self):
        seqs = build_sequences([samples(12)], 5, "train")
        assert [[e.epoch_index for e in s.epochs] for s in seqs] == [[0, 1, 2, 3, 4], [5, 6, 7, 8, 9]]

    def test_inference_windows(self):
        assert len(build_sequences([samples(12)], 5, "inference")) == 8

    def test_too_short_logged(self, caplog):
        with caplog.at_level(logging.INFO):
            assert build_sequences([samples(4)], 5, "inference") == []
        assert "run_skipped" in caplog.text

    def test_discard_breaks_contiguity(self):
        seqs = build_sequences([samples(12, skip=(6,))], 5, "inference")
        assert all(6 not in [e.epoch_index for e in s.epochs] for s in seqs)
        assert len(seqs) == 2 + 1  # 0..5 gives two windows, 7..11 one

    def test_bad_mode(self):
        with pytest.raises(ConfigError):
            build_sequences([samples(5)], 5, "sliding")


class TestFolds:
    def test_sizes(self):
        split = subject_independent_folds([f"S{i}" for i in range(78)], 5, seed=0)
        assert sorted(split.sizes(), reverse=True) == [16, 16, 16, 15, 15]

    def test_deterministic(self):
        subs = [f"S{i}" for i in range(20)]
        assert subject_independent_folds(subs, 5, 3) == subject_independent_folds(subs, 5, 3)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(5, 60), st.integers(2, 5), st.integers(0, 1000))
    def test_partition(self, n, k, seed):
        subs = [f"S{i}" for i in range(n)]
        split = subject_independent_folds(subs, k, seed)
        seen = [s for f in range(k) for s in split.fold_subjects(f)]
        assert sorted(seen) == sorted(subs)
        for f in range(k):
            assert not set(split.fold_subjects(f)) & set(split.train_subjects(f))

    def test_too_few_subjects(self):
        with pytest.raises(ConfigError):
            subject_independent_folds(["a", "b"], 5)


def _recording(rng, sid="S01", n=30, **kw):
    labels = rng.integers(0, 5, n)
    return synthetic_recording(sid, labels, rng, **kw)


class TestPreprocess:
    def test_conservation(self, rng):
        rec = _recording(rng, n=40, discard_rate=0.2, lead_wake=80, tail_wake=90)
        out, row = preprocess_recording(rec, PreprocessConfig())
        assert row["retained"] == row["emitted"] + row["discarded"]
        assert sum(row["class_counts"].values()) == row["emitted"] == len(out.labels)
        assert out.epochs.shape == (row["emitted"], EPOCH_SAMPLES, 2)

    def test_all_wake_excluded(self, rng):
        rec = synthetic_recording("S09", [0] * 20, rng)
        out, row = preprocess_recording(rec, PreprocessConfig())
        assert out is None and row["status"] == "excluded"

    def test_missing_channel(self, rng):
        rec = recording_from_arrays("S1", {"EEG Fpz-Cz": np.zeros(3000)}, ["W"])
        with pytest.raises(InputError):
            preprocess_recording(rec, PreprocessConfig())

    def test_signal_shorter_than_hypnogram(self, rng):
        sig = {"EEG Fpz-Cz": rng.standard_normal(5000), "EOG horizontal": rng.standard_normal(5000)}
        with pytest.raises(IntegrityError):
            preprocess_recording(recording_from_arrays("S1", sig, ["W", "1"]), PreprocessConfig())

    def test_only_eeg_filtered_by_default(self, rng):
        rec = _recording(rng, n=10)
        rec.signals["EOG horizontal"] = rec.signals["EOG horizontal"] + 100.0  # DC offset
        out, _ = preprocess_recording(rec, PreprocessConfig())
        eog = np.asarray(rec.signals["EOG horizontal"], dtype=np.float64)
        expected = (eog - eog.mean()) / eog.std()
        np.testing.assert_allclose(out.epochs[:, :, 1].reshape(-1), expected, atol=1e-5)


class TestManifestPipeline:
    @pytest.fixture
    def manifest(self, tmp_path, rng):
        recs = [_recording(rng, f"S{i}", n=25, discard_rate=0.1, lead_wake=5, tail_wake=5,
                           recording_id=f"S{i}_n1") for i in range(3)]
        recs.append(synthetic_recording("S9", [0] * 12, rng, recording_id="S9_n1"))
        path = tmp_path / "raw" / "manifest.json"
        write_manifest(path, recs)
        return path

    def test_byte_identical_reruns(self, manifest, tmp_path):
        for name in ("a", "b"):
            preprocess_manifest(manifest, tmp_path / name, PreprocessConfig())
        for rel in ["index.json"] + [f"data/S{i}_n1.f32" for i in range(3)]:
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_summary_and_reload(self, manifest, tmp_path):
        summary = preprocess_manifest(manifest, tmp_path / "p", PreprocessConfig())
        assert summary["excluded"] == ["S9_n1"]
        ds = load_processed(tmp_path / "p")
        assert ds.subjects() == ["S0", "S1", "S2"]
        assert summary["total_epochs"] == sum(len(r.labels) for r in ds.recordings)
        assert set(summary["class_counts"]) == set(STAGES)

    def test_parallel_matches_serial(self, manifest, tmp_path):
        preprocess_manifest(manifest, tmp_path / "a", PreprocessConfig(), jobs=1)
        preprocess_manifest(manifest, tmp_path / "b", PreprocessConfig(), jobs=2)
        assert (tmp_path / "a/index.json").read_bytes() == (tmp_path / "b/index.json").read_bytes()

    def test_bad_label_reported_per_recording(self, manifest, tmp_path):
        doc = json.loads(manifest.read_text())
        lab = manifest.parent / doc["recordings"][0]["labels_path"]
        lab.write_text(lab.read_text().replace("W", "Z", 1))
        summary = preprocess_manifest(manifest, tmp_path / "p", PreprocessConfig())
        assert summary["failed"] == ["S0_n1"]
        assert "unknown sleep-stage label" in summary["recordings"][0]["reason"]

    def test_truncated_data_detected(self, manifest, tmp_path):
        preprocess_manifest(manifest, tmp_path / "p", PreprocessConfig())
        f = tmp_path / "p" / "data" / "S0_n1.f32"
        f.write_bytes(f.read_bytes()[:-4])
        with pytest.raises(IntegrityError):
            load_processed(tmp_path / "p")

    def test_sequence_arrays_respect_runs(self, manifest, tmp_path):
        preprocess_manifest(manifest, tmp_path / "p", PreprocessConfig())
        ds = load_processed(tmp_path / "p")
        x, y = sequence_arrays(ds.recordings, 5, "inference")
        expected = sum(max(0, (r.stop - r.start) - 4) for rec in ds.recordings for r in rec.runs())
        assert x.shape == (expected, 5, EPOCH_SAMPLES, 2) and y.shape == (expected, 5)
