import csv

import numpy as np
import pytest

from oracles import miou_bruteforce
from seatlab.evaluation import (collect_feature_histograms, confusion_matrix,
                                histogram_l1_distance, miou, sweep_layer_switch,
                                write_histograms_csv, write_switch_csv)
from seatlab.networks import SegmentationNet
from seatlab.synthdata import DomainBatch, SceneSpec, generate_scene


def test_miou_perfect_prediction():
    gt = np.random.default_rng(0).integers(0, 4, (10, 10))
    report = miou(gt.copy(), gt, 4)
    assert report.miou == 1.0


def test_miou_binary_analytic():
    gt = np.zeros((2, 10), dtype=int)
    gt[:, 5:] = 1
    pred = np.zeros_like(gt)
    report = miou(pred, gt, 2)
    np.testing.assert_allclose(report.iou, [0.5, 0.0])
    np.testing.assert_allclose(report.miou, 0.25)


def test_miou_matches_bruteforce_oracle():
    rng = np.random.default_rng(1)
    for _ in range(50):
        preds = [rng.integers(0, 3, (16, 16)) for _ in range(3)]
        gts = []
        for p in preds:
            g = rng.integers(0, 3, (16, 16))
            g[rng.uniform(size=(16, 16)) < 0.1] = 255
            gts.append(g)
        report = miou(preds, gts, 3)
        expected = miou_bruteforce(preds, gts, 3)
        assert abs(report.miou - expected) < 1e-12


def test_confusion_row_sums_are_gt_counts():
    rng = np.random.default_rng(2)
    gt = rng.integers(0, 4, (20, 20))
    gt[rng.uniform(size=gt.shape) < 0.15] = 255
    pred = rng.integers(0, 4, (20, 20))
    conf = confusion_matrix(pred, gt, 4)
    for c in range(4):
        assert conf[c].sum() == int(np.sum(gt == c))


def test_miou_permutation_equivariant():
    rng = np.random.default_rng(3)
    pred = rng.integers(0, 4, (12, 12))
    gt = rng.integers(0, 4, (12, 12))
    base = miou(pred, gt, 4).miou
    perm = np.array([2, 3, 1, 0])
    again = miou(perm[pred], perm[gt], 4).miou
    np.testing.assert_allclose(base, again, atol=1e-15)


def test_miou_absent_class_excluded_from_mean():
    gt = np.zeros((4, 4), dtype=int)  # only class 0 present
    pred = np.zeros_like(gt)
    report = miou(pred, gt, 3)
    assert report.miou == 1.0
    assert np.isnan(report.iou[1]) and np.isnan(report.iou[2])


def test_miou_class_mask_subset():
    rng = np.random.default_rng(4)
    pred = rng.integers(0, 4, (10, 10))
    gt = rng.integers(0, 4, (10, 10))
    full = miou(pred, gt, 4)
    masked = miou(pred, gt, 4, class_mask=[True, True, False, False])
    np.testing.assert_allclose(masked.miou, np.nanmean(full.iou[:2]))


def test_miou_rejects_invalid_ids():
    with pytest.raises(ValueError, match="invalid"):
        miou(np.full((3, 3), 9), np.zeros((3, 3), dtype=int), 4)
    with pytest.raises(ValueError, match="invalid"):
        miou(np.zeros((3, 3), dtype=int), np.full((3, 3), 4), 4)


# ---------------------------------------------------------------------------
# feature histograms


@pytest.fixture(scope="module")
def small_net():
    return SegmentationNet(num_classes=3, image_size=32, rng=np.random.default_rng(5))


def _batches(domain, n=2):
    spec = SceneSpec.default(image_size=32, num_classes=3)
    return [generate_scene(100 + i, domain, spec) for i in range(n)]


class _BareNormNet:
    """Single norm layer, so the captured activations are the input itself."""

    def __init__(self):
        from seatlab.normalization import DomainNormLayer

        self.layer = DomainNormLayer(3, mode="sat")

    def norm_layers(self):
        return {"only": self.layer}

    def forward(self, x, domain, training=True, update_stats=None):
        return self.layer.forward(x, domain, training, update_stats=update_stats)


def test_constant_batch_mass_in_zero_bin():
    net = _BareNormNet()
    const = DomainBatch(image=np.full((3, 32, 32), 0.5), label=None, domain="source")
    hists = collect_feature_histograms(net, {"source": [const]},
                                       layer_names=["only"], training=True)
    (h,) = hists
    zero_bin = int(np.searchsorted(h.bin_edges, 0.0, side="right")) - 1
    assert h.counts[zero_bin] == h.counts.sum()


def test_histogram_counts_conserved(small_net):
    batches = {"source": _batches("source"), "target": _batches("target")}
    hists = collect_feature_histograms(small_net, batches, layer_names=["layer2.block1"])
    for h in hists:
        assert h.counts.sum() == h.sample_count
        # layer2 width 32, spatial 16x16, 2 batches
        assert h.sample_count == 32 * 16 * 16 * 2


def test_histogram_unknown_layer_rejected(small_net):
    with pytest.raises(ValueError, match="unknown layer"):
        collect_feature_histograms(small_net, {"source": _batches("source", 1)},
                                   layer_names=["layer9.block1"])


def test_histogram_csv_format(tmp_path, small_net):
    hists = collect_feature_histograms(small_net, {"source": _batches("source", 1)},
                                       layer_names=["layer1.block1"], bins=10)
    path = tmp_path / "hists.csv"
    write_histograms_csv(path, hists)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["layer", "domain", "bin_left", "count"]
    assert len(rows) == 1 + 10
    assert sum(int(r[3]) for r in rows[1:]) == hists[0].sample_count


def test_histogram_l1_distance_nonzero_for_different_domains(small_net):
    batches = {"source": _batches("source"), "target": _batches("target")}
    hists = collect_feature_histograms(small_net, batches, layer_names=["layer4.block2"],
                                       training=True)
    by_domain = {h.domain: h for h in hists}
    d = histogram_l1_distance(by_domain["source"], by_domain["target"])
    assert d > 0.0


# ---------------------------------------------------------------------------
# switch sweep plumbing (full behavior exercised in acceptance)


def test_sweep_layer_switch_rows_and_csv(tmp_path, small_net):
    spec = SceneSpec.default(image_size=32, num_classes=3)
    batches = [generate_scene(200 + i, "target", spec) for i in range(2)]
    rows = sweep_layer_switch(small_net, batches, ["none", "4-4", "1-4"], 0.1, 3)
    assert [r[0] for r in rows] == ["none", "4-4", "1-4"]
    path = tmp_path / "switch.csv"
    write_switch_csv(path, rows)
    parsed = list(csv.reader(path.open()))
    assert parsed[0] == ["switch", "miou"]
    assert len(parsed) == 4


def test_prediction_ppm_dump(tmp_path):
    from seatlab.evaluation import prediction_to_ppm
    from seatlab.synthdata import read_ppm

    rng = np.random.default_rng(6)
    pred = rng.integers(0, 3, (8, 8))
    gt = rng.integers(0, 3, (8, 8))
    gt[0, 0] = 255
    palette = [(0.1, 0.1, 0.1), (0.9, 0.2, 0.2), (0.2, 0.9, 0.2)]
    path = tmp_path / "panel.ppm"
    prediction_to_ppm(path, pred, gt, palette)
    panel = read_ppm(path)
    assert panel.shape == (3, 8, 16)  # prediction and ground truth side by side
    assert np.allclose(panel[:, 0, 8], 0.0, atol=1 / 255)  # ignore drawn black


def test_sweep_layer_switch_reproducible(small_net):
    spec = SceneSpec.default(image_size=32, num_classes=3)
    batches = [generate_scene(300 + i, "target", spec) for i in range(2)]
    rows_a = sweep_layer_switch(small_net, batches, ["none", "2-4"], 0.1, 3)
    rows_b = sweep_layer_switch(small_net, batches, ["none", "2-4"], 0.1, 3)
    assert rows_a == rows_b
