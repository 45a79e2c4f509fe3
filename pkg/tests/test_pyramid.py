import json

import numpy as np
import pytest

from amam.aa import FusionMode
from amam.io import decode_amtn, encode_amtn, load_bundle, read_amtn, save_bundle, write_amtn, AmtnFormatError
from amam.pyramid import (
    AmamConfig,
    FeaturePyramid,
    PyramidError,
    ToyBackbone,
    ToyHead,
    amam_forward,
    init_amam,
    load_amam,
    save_amam,
    toy_backbone,
    toy_head,
)
from amam.tensor import Tensor, gradcheck, mul, sum_all


def pyramid(rng, levels, n=1, top=8):
    return FeaturePyramid([Tensor(rng.standard_normal((n, c, top >> i, top >> i))) for i, c in enumerate(levels)])


def test_identity_configuration_is_bit_exact(rng):
    cfg = AmamConfig(levels=(32, 64, 128), enabled_me=False, enabled_aa=False)
    pyr = pyramid(rng, cfg.levels, top=16)
    out = amam_forward(pyr, init_amam(cfg))
    for a, b in zip(pyr.maps, out.maps):
        assert a.data.tobytes() == b.data.tobytes()


def test_three_level_shapes(rng):
    cfg = AmamConfig(levels=(32, 64, 128), heads=4)
    pyr = FeaturePyramid([Tensor(rng.standard_normal(s)) for s in ((1, 32, 64, 64), (1, 64, 32, 32), (1, 128, 16, 16))])
    out = amam_forward(pyr, init_amam(cfg))
    assert out.shapes == [(1, 32, 64, 64), (1, 64, 32, 32), (1, 128, 16, 16)]


@pytest.mark.parametrize("me,aa", [(False, False), (True, False), (False, True), (True, True)])
@pytest.mark.parametrize("mode", list(FusionMode))
def test_ablation_cells_preserve_shapes(rng, me, aa, mode):
    cfg = AmamConfig(levels=(8, 16, 32), heads=4, fusion_mode=mode, enabled_me=me, enabled_aa=aa)
    pyr = pyramid(rng, cfg.levels, n=2)
    assert amam_forward(pyr, init_amam(cfg)).shapes == pyr.shapes


@pytest.mark.parametrize("heads", [1, 2, 4, 8, 16])
def test_head_sweep(rng, heads):
    cfg = AmamConfig(levels=(16, 32, 64), heads=heads)
    pyr = pyramid(rng, cfg.levels, top=4)
    assert amam_forward(pyr, init_amam(cfg)).shapes == pyr.shapes


def test_gradcheck_every_level(rng):
    cfg = AmamConfig(levels=(4, 8, 16), heads=2, seed=3)
    params = init_amam(cfg)
    pyr = pyramid(rng, cfg.levels, top=4)
    weights = [rng.standard_normal(m.shape) for m in pyr.maps]

    def f(*maps):
        out = amam_forward(FeaturePyramid(list(maps)), params)
        return sum(sum_all(mul(m, w)) for m, w in zip(out.maps, weights))

    assert gradcheck(f, list(pyr.maps)) < 1e-4


def test_pyramid_invariant_errors(rng):
    with pytest.raises(PyramidError, match="level 1: C=48"):
        FeaturePyramid([Tensor(np.zeros((1, 16, 8, 8))), Tensor(np.zeros((1, 48, 4, 4)))])
    with pytest.raises(PyramidError, match="level 1: H=3"):
        FeaturePyramid([Tensor(np.zeros((1, 16, 8, 8))), Tensor(np.zeros((1, 32, 3, 4)))])
    cfg = AmamConfig(levels=(8, 16), heads=2)
    with pytest.raises(PyramidError, match="config expects 8"):
        amam_forward(pyramid(rng, (4, 8)), init_amam(cfg))


def test_config_validation():
    with pytest.raises(ValueError, match="expected 2\\*32"):
        AmamConfig(levels=(32, 96))
    with pytest.raises(ValueError, match="does not divide"):
        AmamConfig(levels=(12, 24), heads=8)


def test_config_json_round_trip():
    cfg = AmamConfig(levels=(8, 16, 32), heads=2, fusion_mode="concat", enabled_aa=False, seed=11)
    assert AmamConfig.from_json(cfg.to_json()) == cfg
    assert json.loads(cfg.to_json())["fusion_mode"] == "concat"
    with pytest.raises(ValueError, match="unknown"):
        AmamConfig.from_dict({"levels": [8], "bogus": 1})


def test_backbone_levels(randt):
    pyr = toy_backbone(randt(1, 1, 64, 64), ToyBackbone.create(0))
    assert pyr.shapes == [(1, 32, 32, 32), (1, 64, 16, 16), (1, 128, 8, 8)]


def test_backbone_zero_image():
    pyr = toy_backbone(Tensor(np.zeros((1, 1, 16, 16))), ToyBackbone.create(0))
    assert all(not m.data.any() for m in pyr.maps)


def test_backbone_seeded(randt):
    x = randt(1, 1, 16, 16)
    a = toy_backbone(x, ToyBackbone.create(5))
    b = toy_backbone(x, ToyBackbone.create(5))
    assert all(p.data.tobytes() == q.data.tobytes() for p, q in zip(a.maps, b.maps))


def test_backbone_divisibility(randt):
    with pytest.raises(ValueError, match="divisible by 8"):
        toy_backbone(randt(1, 1, 20, 16), ToyBackbone.create(0))


def test_head_shapes_and_zero_weights(rng):
    head = ToyHead.create(0)
    pyr = pyramid(rng, (32, 64, 128), top=32)
    outs = toy_head(pyr, head)
    assert [o.shape for o in outs] == [(1, 5, 32, 32), (1, 5, 16, 16), (1, 5, 8, 8)]
    for w in head.weights:
        w.data[...] = 0.0
    for o in toy_head(pyr, head):
        np.testing.assert_array_equal(1 / (1 + np.exp(-o.data[:, 0])), 0.5)


def test_head_gradcheck(rng):
    head = ToyHead.create(0, channels=(4, 8))
    pyr = pyramid(rng, (4, 8), top=4)
    weights = [rng.standard_normal((1, 5, 4, 4)), rng.standard_normal((1, 5, 2, 2))]

    def f(*xs):
        outs = toy_head(FeaturePyramid(list(xs[:2])), head)
        return sum(sum_all(mul(o, w)) for o, w in zip(outs, weights))

    assert gradcheck(f, list(pyr.maps) + list(head.parameters().values())) < 1e-6


def test_end_to_end_gradient_reaches_image(rng):
    cfg = AmamConfig(levels=(8, 16, 32), heads=2)
    backbone, head, params = ToyBackbone.create(0, cfg.levels), ToyHead.create(0, cfg.levels), init_amam(cfg)
    image = Tensor(rng.standard_normal((1, 1, 16, 16)), requires_grad=True)
    outs = toy_head(amam_forward(toy_backbone(image, backbone), params), head)
    sum(o.sum() for o in outs).backward()
    assert image.grad is not None and np.abs(image.grad).sum() > 0


# -- AMTN ------------------------------------------------------------------
def test_amtn_layout_is_bit_exact():
    arr = np.arange(6, dtype=np.float32).reshape(1, 2, 3, 1)
    blob = encode_amtn(arr)
    assert blob[:5] == b"AMTN\x01"
    assert blob[5:21] == np.array([1, 2, 3, 1], dtype="<u4").tobytes()
    assert blob[21:] == arr.astype("<f4").tobytes()
    assert decode_amtn(blob).tobytes() == arr.tobytes()


def test_amtn_file_round_trip(tmp_path, rng):
    arr = rng.standard_normal((2, 3, 4, 5)).astype(np.float32)
    write_amtn(tmp_path / "x.amtn", arr)
    assert read_amtn(tmp_path / "x.amtn").tobytes() == arr.tobytes()


@pytest.mark.parametrize("blob,msg", [
    (b"XXXX\x01" + bytes(16), "magic"),
    (b"AMTN\x02" + np.array([1, 1, 1, 1], "<u4").tobytes() + bytes(4), "version"),
    (b"AMTN\x01" + np.array([1, 1, 1, 2], "<u4").tobytes() + bytes(4), "expected 29"),
    (b"AMT", "truncated"),
])
def test_amtn_rejects_malformed(blob, msg):
    with pytest.raises(AmtnFormatError, match=msg):
        decode_amtn(blob)


def test_bundle_round_trip(tmp_path, rng):
    tensors = {"a": rng.standard_normal((3, 4)).astype(np.float32), "b/c": np.ones(5, np.float32), "e": np.zeros(0)}
    save_bundle(tmp_path, tensors, {"note": "x"})
    back, meta = load_bundle(tmp_path)
    assert meta == {"note": "x"}
    for k in tensors:
        assert back[k].shape == tensors[k].shape
        np.testing.assert_array_equal(back[k], tensors[k])


def test_amam_param_bundle(tmp_path, rng):
    cfg = AmamConfig(levels=(4, 8, 16), heads=2, seed=9)
    params = init_amam(cfg)
    params.aa[1].alpha_logits.data = np.array([0.123456789012345])
    params.me[0].cbr_cur.bn_var[...] = 2.5
    save_amam(tmp_path, params)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["meta"]["attention"]["level1"]["alpha_logits"] == ["0.123456789012345"]
    assert manifest["meta"]["layers"]["level1"]["cbr_fuse"]["k"] == 3
    back = load_amam(tmp_path)
    assert back.aa[1].alpha_logits.data[0] == 0.123456789012345
    np.testing.assert_array_equal(back.me[0].cbr_cur.bn_var, 2.5)
    pyr = pyramid(rng, cfg.levels)
    a = amam_forward(pyr, params)
    b = amam_forward(pyr, back)
    for x, y in zip(a.maps, b.maps):
        np.testing.assert_allclose(x.data, y.data, atol=1e-5)
