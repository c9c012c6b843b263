import csv
import json
import math
import re

import numpy as np
import pytest

from sleepcmt.errors import UsageError
from sleepcmt.interpret import (
    AttentionReport,
    cross_modal_scores,
    export_report,
    inter_epoch_scores,
    interpret,
    intra_modal_scores,
    reports_from_cache,
    window_opacity,
)
from sleepcmt.model import EpochCmt, SequenceCmt


class TestScores:
    def test_identical_windows_uniform(self, rng):
        z = np.tile(rng.standard_normal(16), (60, 1))
        np.testing.assert_allclose(intra_modal_scores(rng.standard_normal(16), z), 1 / 60)

    def test_aligned_window_dominates(self):
        e = 16
        cls = np.zeros(e)
        cls[0] = 1.0
        z = np.zeros((60, e))
        z[:, 1] = 1.0  # orthogonal to cls
        z[17] = 200.0 * cls
        assert int(np.argmax(intra_modal_scores(cls, z))) == 17

    def test_single_modality(self, rng):
        np.testing.assert_allclose(cross_modal_scores(rng.standard_normal(8), rng.standard_normal((1, 8))), [1.0])

    def test_equal_modalities(self, rng):
        rep = rng.standard_normal(8)
        np.testing.assert_allclose(cross_modal_scores(rng.standard_normal(8), np.stack([rep, rep])), [0.5, 0.5])

    def test_closed_form_two_logits(self):
        e = 4
        q = np.array([1.0, 1.0, 0.0, 0.0])
        keys = np.array([[2.0, 0.0, 0.0, 0.0], [0.0, 0.0, 3.0, 0.0]])  # dot products 2 and 0
        a = math.exp(2 / math.sqrt(e))
        np.testing.assert_allclose(cross_modal_scores(q, keys), [a / (a + 1), 1 / (a + 1)], rtol=1e-12)

    def test_inter_epoch(self, rng):
        np.testing.assert_allclose(inter_epoch_scores(rng.standard_normal((1, 8))), [[1.0]])
        same = np.tile(rng.standard_normal(8), (5, 1))
        np.testing.assert_allclose(inter_epoch_scores(same), np.full((5, 5), 0.2))
        np.testing.assert_allclose(inter_epoch_scores(rng.standard_normal((5, 8))).sum(axis=1), 1.0, atol=1e-12)


@pytest.fixture
def seq_report(rng, tiny_cfg):
    model = SequenceCmt(tiny_cfg, seed=0)
    x = rng.standard_normal((2, 5, 3000, 2)).astype(np.float32)
    return interpret(model, x, ["rec:0", "rec:5"], labels=rng.integers(0, 5, (2, 5)))


class TestReports:
    def test_sequence_report_shapes(self, seq_report):
        rep = seq_report[0]
        assert rep.intra.shape == (5, 2, 60)
        assert rep.cross.shape == (5, 2)
        assert rep.inter.shape == (5, 5)
        for arr in (rep.intra, rep.cross, rep.inter):
            np.testing.assert_allclose(arr.sum(axis=-1), 1.0, atol=1e-6)

    def test_epoch_model_has_no_inter(self, rng, tiny_cfg):
        reps = interpret(EpochCmt(tiny_cfg), rng.standard_normal((1, 3000, 2)).astype(np.float32), ["e"])
        assert reps[0].inter is None and reps[0].intra.shape == (1, 2, 60)

    def test_missing_cache(self):
        with pytest.raises(UsageError):
            reports_from_cache(None, np.zeros((1, 5)), ["EEG"], ["a"])

    def test_json_round_trip(self, seq_report, tmp_path):
        rep = seq_report[0]
        (path,) = export_report(rep, "json", tmp_path)
        back = AttentionReport.from_dict(json.loads(path.read_text()))
        for name in ("intra", "cross", "inter", "probabilities"):
            np.testing.assert_allclose(getattr(back, name), getattr(rep, name), rtol=1e-12)
        np.testing.assert_array_equal(back.labels, rep.labels)

    def test_csv_counts_and_sums(self, seq_report, tmp_path):
        paths = export_report(seq_report[0], "csv", tmp_path)
        with open(paths[0]) as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 5 * 2 * 60
        sums = {}
        for r in rows:
            key = (r["epoch_idx"], r["modality"])
            sums[key] = sums.get(key, 0.0) + float(r["score"])
        assert len(sums) == 10
        np.testing.assert_allclose(list(sums.values()), 1.0, atol=1e-6)
        with open(paths[1]) as fh:
            cross = list(csv.DictReader(fh))
        assert len(cross) == 5 * 2

    def test_svg_opacity_rule(self, seq_report, tmp_path):
        rep = seq_report[1]
        (path,) = export_report(rep, "svg", tmp_path)
        svg = path.read_text()
        pat = re.compile(r'class="intra" data-epoch="(\d+)" data-modality="(\w+)" data-window="(\d+)"'
                         r'[^>]*fill-opacity="([0-9.]+)"')
        found = pat.findall(svg)
        assert len(found) == 5 * 2 * 60
        for ep, mod, win, alpha in found:
            scores = rep.intra[int(ep), rep.modalities.index(mod)]
            assert float(alpha) == pytest.approx(scores[int(win)] / scores.max(), abs=1e-6)
        np.testing.assert_allclose(window_opacity(np.array([0.1, 0.4, 0.2])), [0.25, 1.0, 0.5])
        cross_bars = re.findall(r'class="cross" data-epoch="0"', svg)
        assert len(cross_bars) == 2

    def test_unknown_format(self, seq_report, tmp_path):
        with pytest.raises(UsageError):
            export_report(seq_report[0], "png", tmp_path)
