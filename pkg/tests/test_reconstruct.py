import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ctstandard.autodiff.tensor import Tensor
from ctstandard.dicomio import Volume, read_volume, write_volume
from ctstandard.gan import CriticOutput, IdentityGenerator, always_fake_critic, always_real_critic
from ctstandard.patches import Patch, soft_tissue_mask
from ctstandard.phantom import apply_protocol, generate_phantom_volume, get_protocol
from ctstandard.reconstruct import (
    VARIANTS,
    CoverageError,
    DegeneratePatchError,
    IrreparableError,
    Placed,
    ReconstructConfig,
    detect_box_artifacts,
    fuse_patches,
    hu_denormalize,
    qualify_patches,
    reconstruct_dicom,
    reconstruct_slice,
    repair_and_reintegrate,
)


@pytest.fixture(scope="module")
def phantom_slices():
    truth = generate_phantom_volume(21, (2, 128, 128))
    return np.rint(apply_protocol(truth, get_protocol("BR40-sim"), 5).hu)


class MeanCritic:
    dtype = np.dtype(np.float64)

    def __call__(self, x):
        p = (x.data.mean(axis=(1, 2, 3)) > 0.5).astype(float)
        prob = np.stack([p, 1 - p], axis=1)
        zeros = Tensor(np.zeros(len(p)))
        return CriticOutput(zeros, Tensor(prob), x, Tensor(prob), zeros)


def patch(value):
    return Patch((0, 0, 0), 4, np.full((4, 4), value), -100.0, 100.0)


def test_denormalize_examples():
    gray = np.array([[0.0, 0.5, 1.0]])
    np.testing.assert_array_equal(hu_denormalize(gray, 900.0, -1000.0), [[-1000.0, -50.0, 900.0]])
    np.testing.assert_array_equal(hu_denormalize(gray, 900.0, -1000.0, drop_min_offset=True), [[0.0, 950.0, 1900.0]])


def test_denormalize_rejects_constant_and_bad_range():
    with pytest.raises(DegeneratePatchError):
        hu_denormalize(np.full((2, 2), 0.3), 900.0, -1000.0)
    with pytest.raises(ValueError):
        hu_denormalize(np.array([[0.0, 1.0]]), -5.0, 5.0)


def test_qualify_constant_critics():
    ps = [patch(0.2), patch(0.8)]
    assert len(qualify_patches([always_real_critic()], ps)[0]) == 2
    kept, dropped = qualify_patches([always_fake_critic()], ps)
    assert (kept, dropped) == ([], 2)


def test_qualify_mixed_fixture():
    ps = [patch(v) for v in (0.9, 0.8, 0.7, 0.6, 0.95, 0.55, 0.75, 0.1, 0.2, 0.3)]
    kept, dropped = qualify_patches(MeanCritic(), ps)
    assert (len(kept), dropped) == (7, 3)
    kept, dropped = qualify_patches([MeanCritic(), always_fake_critic()], ps)
    assert (len(kept), dropped) == (0, 10)


def test_fuse_single_and_identical():
    orig = np.zeros((6, 6))
    mask = np.ones((6, 6), dtype=bool)
    block = np.arange(36.0).reshape(6, 6)
    fused, _ = fuse_patches([Placed(0, 0, block)], mask, orig)
    np.testing.assert_array_equal(fused, block)
    fused, _ = fuse_patches([Placed(0, 0, block), Placed(0, 0, block.copy())], mask, orig)
    np.testing.assert_array_equal(fused, block)


def test_fuse_overlap_midpoint():
    orig = np.zeros((4, 6))
    mask = np.ones((4, 6), dtype=bool)
    a, b = Placed(0, 0, np.full((4, 4), 20.0)), Placed(0, 2, np.full((4, 4), 30.0))
    fused, _ = fuse_patches([a, b], mask, orig)
    np.testing.assert_array_equal(fused[:, 2:4], 25.0)
    np.testing.assert_array_equal(fused[:, :2], 20.0)


def test_fuse_leaves_unmasked_pixels_alone():
    orig = np.random.default_rng(0).normal(size=(5, 5))
    mask = np.zeros((5, 5), dtype=bool)
    mask[1:4, 1:4] = True
    fused, _ = fuse_patches([Placed(0, 0, np.ones((5, 5)))], mask, orig)
    assert np.array_equal(fused[~mask], orig[~mask])
    with pytest.raises(CoverageError):
        fuse_patches([Placed(0, 0, np.ones((2, 2)))], mask, orig)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 8))
def test_fusion_order_independence(seed, n):
    rng = np.random.default_rng(seed)
    blocks = []
    for _ in range(n):
        s = int(rng.integers(3, 9))
        r, c = (int(v) for v in rng.integers(0, 12 - s + 1, size=2))
        blocks.append(Placed(r, c, rng.normal(0, 300, (s, s))))
    orig = rng.normal(size=(12, 12))
    mask = np.zeros((12, 12), dtype=bool)
    for b in blocks:
        r0, r1, c0, c1 = b.box
        mask[r0:r1, c0:c1] = True
    a, _ = fuse_patches(blocks, mask, orig)
    perm = [blocks[i] for i in rng.permutation(n)]
    b, _ = fuse_patches(perm, mask, orig)
    assert np.array_equal(a, b)


def test_constant_slice_has_no_seams():
    rep = detect_box_artifacts(np.full((32, 32), 40.0), [(0, 0, 16), (0, 16, 16), (16, 0, 16)])
    assert rep.clean


def test_planted_step_is_flagged():
    img = np.random.default_rng(1).normal(0, 5, (32, 32))
    img[:, 16:] += 200.0
    rep = detect_box_artifacts(img, [(0, 0, 16), (0, 16, 16)])
    assert {(s.patch, s.side) for s in rep.flagged} == {(0, "right"), (1, "left")}


def test_hole_pixel_reported():
    img = np.zeros((8, 8))
    img[3, 4] = np.nan
    rep = detect_box_artifacts(img, [(0, 0, 8)])
    assert rep.missing.tolist() == [[3, 4]]


def test_repair_removes_planted_seam():
    rng = np.random.default_rng(2)
    orig = rng.normal(0, 5, (20, 32))
    mask = np.ones_like(orig, dtype=bool)
    a = Placed(0, 0, orig[:, 0:20].copy())
    bad = orig[:, 12:32].copy()
    bad[:, :2] += 300.0
    b = Placed(0, 12, bad)
    fused, _ = fuse_patches([a, b], mask, orig)
    rep = detect_box_artifacts(fused, [a, b], mask)
    assert any(s.patch == 1 and s.side == "left" for s in rep.flagged)
    res = repair_and_reintegrate(rep, [a, b], mask, orig)
    assert res.residual == [] and res.repaired >= 1
    assert detect_box_artifacts(res.fused, res.placed, mask).clean


def test_repair_without_overlap_is_irreparable():
    orig = np.random.default_rng(3).normal(0, 5, (16, 32))
    mask = np.ones_like(orig, dtype=bool)
    left = Placed(0, 0, orig[:, :16].copy())
    right = Placed(0, 16, orig[:, 16:] + 300.0)
    fused, _ = fuse_patches([left, right], mask, orig)
    rep = detect_box_artifacts(fused, [left, right], mask)
    with pytest.raises(IrreparableError):
        repair_and_reintegrate(rep, [left, right], mask, orig)


def test_no_flags_means_no_change():
    orig = np.random.default_rng(4).normal(0, 5, (16, 16))
    mask = np.ones_like(orig, dtype=bool)
    blocks = [Placed(0, 0, orig.copy())]
    rep = detect_box_artifacts(orig, blocks, mask)
    res = repair_and_reintegrate(rep, blocks, mask, orig)
    assert np.array_equal(res.fused, orig) and res.iterations == 0


@pytest.mark.parametrize("variant", VARIANTS)
def test_identity_pipeline(phantom_slices, variant):
    hu = phantom_slices[0]
    cfg = ReconstructConfig(variant=variant, size_range=(32, 64), seed=1)
    out, rep = reconstruct_slice(hu, IdentityGenerator(), [always_real_critic()], cfg)
    mask = soft_tissue_mask(hu)
    assert np.abs(out - hu)[mask].max() <= 1.0
    assert np.array_equal(out[~mask], hu[~mask])
    assert rep.missing_pixels == 0 and rep.patches > 0


def test_all_air_slice_passes_through():
    hu = np.full((64, 64), -1024.0)
    out, rep = reconstruct_slice(hu, IdentityGenerator(), [always_real_critic()], ReconstructConfig(size_range=(16, 32)))
    assert np.array_equal(out, hu)
    assert rep.patches == 0 and "no patches" in rep.notes


def test_unknown_variant_rejected():
    with pytest.raises(ValueError, match="variant"):
        ReconstructConfig(variant="magic")


def test_dicom_directory_round_trip(tmp_path, phantom_slices):
    src, dst = tmp_path / "in", tmp_path / "out"
    write_volume(src, Volume(phantom_slices, "BR40-sim", 1.0))
    reports = reconstruct_dicom(src, dst, IdentityGenerator(), [always_real_critic()],
                                ReconstructConfig(size_range=(32, 64)))
    assert len(reports) == len(phantom_slices)
    out = read_volume(dst)
    assert out.kernel_label == "BL64-sim"
    assert np.abs(out.hu - phantom_slices).max() <= 1.0
    lines = (dst / "report.jsonl").read_text().splitlines()
    assert [json.loads(line)["slice"] for line in lines] == [0, 1]
    (tmp_path / "empty").mkdir()
    with pytest.raises(FileNotFoundError):
        reconstruct_dicom(tmp_path / "empty", dst, IdentityGenerator(), [], ReconstructConfig())
