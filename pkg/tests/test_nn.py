import numpy as np
import pytest

from ggpvqa.nn import (ANS_ID, CLS_ID, COMPONENTS, END_ID, PAD_ID, CheckpointError, ModelConfig,
                       MomentumCopies, MultiModalModel, load_checkpoint, momentum_update,
                       read_checkpoint, save_checkpoint)
from ggpvqa.synthdata import VOCAB, gen_pretrain_set, pad_ids, stack_grids


@pytest.fixture(scope="module")
def model():
    return MultiModalModel(seed=1)


@pytest.fixture(scope="module")
def scenes():
    data = gen_pretrain_set(5, 4)
    return stack_grids([s for s, _ in data]), pad_ids([c for _, c in data])


def test_config_ratio_enforced():
    with pytest.raises(ValueError, match="twice"):
        ModelConfig(visual_depth=3, text_depth=2)
    with pytest.raises(ValueError):
        ModelConfig(width=30, heads=4)


def test_parameter_census(model):
    cfg = model.config
    for n in model.params:
        assert n.split(".", 1)[0] in COMPONENTS
    layers = lambda comp: {n.split(".")[2] for n in model.names(comp) if ".layers." in n}
    assert layers("visual") == {str(i) for i in range(cfg.visual_depth)}
    assert layers("text") == {str(i) for i in range(cfg.text_depth)}
    assert model.params["visual.pos"].shape == (cfg.num_patches + 1, cfg.width)
    assert model.params["text.tok_embed"].shape == (len(VOCAB), cfg.width)
    assert model.params["img_proj.weight"].shape == (cfg.width, cfg.embed_dim)
    assert model.params["itm_head.weight"].shape == (cfg.width, 2)
    # same seed, same weights
    other = MultiModalModel(seed=1)
    assert all(np.array_equal(other.params[n].data, p.data) for n, p in model.params.items())


def test_patchify_layout(model):
    img = np.arange(64.0).reshape(8, 8)
    patches = model.patchify(img).data[0]
    assert patches.shape == (16, 4)
    np.testing.assert_array_equal(patches[0], [0, 1, 8, 9])
    np.testing.assert_array_equal(patches[1], [2, 3, 10, 11])
    np.testing.assert_array_equal(patches[4], [16, 17, 24, 25])
    with pytest.raises(ValueError):
        model.patchify(np.zeros((2, 7, 8)))


def test_encode_image_properties(model, scenes):
    imgs, _ = scenes
    a, ta = model.encode_image(imgs)
    b, _ = model.encode_image(imgs.copy())
    assert a.shape == (4, 32) and ta.shape == (4, 17, 32)
    np.testing.assert_array_equal(a.data, b.data)
    z, zt = model.encode_image(np.zeros((1, 8, 8)))
    assert np.isfinite(zt.data).all()
    # same pixel content, two patches trade places
    one = np.zeros((1, 8, 8))
    one[0, :2, :2] = 0.9
    other = np.zeros((1, 8, 8))
    other[0, 6:, 6:] = 0.9
    np.testing.assert_array_equal(np.sort(model.patchify(one).data, axis=1),
                                  np.sort(model.patchify(other).data, axis=1))
    c1, _ = model.encode_image(one)
    c2, _ = model.encode_image(other)
    assert np.abs(c1.data - c2.data).max() > 1e-6


def test_encode_text_properties(model):
    ids = np.array([[CLS_ID, 6, 7, 8]])
    a, _, valid = model.encode_text(ids)
    b, _, _ = model.encode_text(ids)
    np.testing.assert_array_equal(a.data, b.data)
    assert valid.all()
    padded = np.array([[CLS_ID, 6, 7, 8, PAD_ID, PAD_ID, PAD_ID]])
    p, _, pv = model.encode_text(padded)
    np.testing.assert_allclose(p.data, a.data, rtol=0, atol=1e-12)
    assert pv.tolist() == [[True] * 4 + [False] * 3]
    c, _, _ = model.encode_text(np.array([[CLS_ID, 6, 9, 8]]))
    assert np.abs(c.data - a.data).max() > 1e-6
    with pytest.raises(IndexError):
        model.encode_text(np.array([[CLS_ID, 48]]))
    with pytest.raises(ValueError):
        model.encode_text(np.full((1, 26), 6))


def test_fuse_properties(model, scenes):
    imgs, caps = scenes
    _, it = model.encode_image(imgs)
    _, tt, valid = model.encode_text(caps)
    f1 = model.fuse(it, tt, valid).data
    np.testing.assert_array_equal(f1, model.fuse(it, tt, valid).data)
    swapped = model.fuse(it[::-1], tt, valid).data
    assert np.abs(swapped - f1).max() > 1e-6
    masked = model.fuse(it, tt, valid, image_mask=np.zeros((4, 17))).data
    text_only = model.fuse(it, tt, valid, use_image=False).data
    np.testing.assert_array_equal(masked, text_only)
    partial = model.fuse(it, tt, valid, image_mask=np.ones((4, 17))).data
    np.testing.assert_allclose(partial, f1, atol=1e-12)
    with pytest.raises(ValueError):
        model.fuse(it[:2], tt, valid)


def test_momentum_update_cases():
    live = MultiModalModel(seed=2, with_decoder=False)
    for m, expect in ((1.0, "copy"), (0.0, "live")):
        copies = MomentumCopies(live, momentum=m)
        before = {n: c.data.copy() for n, c in copies.params.items()}
        for p in live.params.values():
            p.data += 0.1
        momentum_update(live, copies)
        for n, c in copies.params.items():
            want = before[n] if expect == "copy" else live.params[n].data
            np.testing.assert_array_equal(c.data, want)
    copies = MomentumCopies(live, momentum=0.995)
    rng = np.random.default_rng(0)
    deltas = {}
    for n, p in live.params.items():
        deltas[n] = rng.normal(size=p.shape)
        p.data += deltas[n]
    copies.update(live)
    for n, c in copies.params.items():
        np.testing.assert_allclose(live.params[n].data - c.data, 0.995 * deltas[n], atol=1e-12)
    assert set(copies.params) == {n for n in live.params
                                  if n.split(".")[0] in ("visual", "text", "img_proj", "txt_proj")}
    with pytest.raises(ValueError):
        MomentumCopies(live, momentum=1.5)


def test_momentum_drift_is_monotone():
    live = MultiModalModel(seed=3, with_decoder=False)
    copies = MomentumCopies(live, momentum=0.9)
    target = {n: p.data + 1.0 for n, p in live.params.items()}
    for p in live.params.values():
        p.data += 1.0
    gaps = []
    for _ in range(5):
        copies.update(live)
        gaps.append(max(np.abs(c.data - target[n]).max() for n, c in copies.params.items()))
    assert all(b < a for a, b in zip(gaps, gaps[1:]))


def test_decoder_causality(model, scenes):
    imgs, caps = scenes
    joint, valid = model.joint_representation(imgs[:2], caps[:2])
    prefix = np.array([[ANS_ID, 10, 11, 12, 13]] * 2)
    base = model.decode_answer(joint, valid, prefix).data
    np.testing.assert_array_equal(base, model.decode_answer(joint, valid, prefix).data)
    for j in range(1, 5):
        changed = prefix.copy()
        changed[:, j] = 20
        out = model.decode_answer(joint, valid, changed).data
        np.testing.assert_array_equal(out[:, :j], base[:, :j])
        assert np.abs(out[:, j:] - base[:, j:]).max() > 0


def test_decoder_prefix_checks(model, scenes):
    imgs, caps = scenes
    joint, valid = model.joint_representation(imgs[:1], caps[:1])
    with pytest.raises(ValueError):
        model.decode_answer(joint, valid, np.array([[10, 11]]))
    with pytest.raises(ValueError):
        model.decode_answer(joint, valid, np.full((1, 9), ANS_ID))
    bare = MultiModalModel(seed=0, with_decoder=False)
    with pytest.raises(RuntimeError):
        bare.decode_answer(joint, valid, np.array([[ANS_ID]]))


def test_greedy_decode_after_overfit(overfit_single):
    model, sample, losses = overfit_single
    assert losses[-1] < 0.01
    out = model.greedy_decode(stack_grids([sample.scene]), pad_ids([sample.question_ids]))
    assert out == [list(sample.answer_ids[1:-1])]
    assert sample.answer_ids[-1] == END_ID


def test_checkpoint_round_trip(tmp_path, model):
    path = save_checkpoint(model, tmp_path / "m.npz", extra={"epoch": 3})
    manifest, arrays = read_checkpoint(path)
    assert manifest["epoch"] == 3 and manifest["model"]["width"] == 32
    other = MultiModalModel(seed=99)
    assert load_checkpoint(other, path) == []
    for n, p in model.params.items():
        assert p.data.tobytes() == other.params[n].data.tobytes()
        assert arrays[n].dtype == np.float64


def test_checkpoint_without_decoder_leaves_it_fresh(tmp_path):
    enc = MultiModalModel(seed=4, with_decoder=False)
    path = save_checkpoint(enc, tmp_path / "enc.npz")
    full = MultiModalModel(seed=5)
    fresh_before = {n: full.params[n].data.copy() for n in full.names("decoder")}
    fresh = load_checkpoint(full, path)
    assert sorted(fresh) == sorted(fresh_before)
    for n, arr in fresh_before.items():
        np.testing.assert_array_equal(full.params[n].data, arr)
    np.testing.assert_array_equal(full.params["visual.cls"].data, enc.params["visual.cls"].data)


def test_checkpoint_mismatch_names_every_problem(tmp_path, model):
    path = save_checkpoint(model, tmp_path / "m.npz")
    with pytest.raises(CheckpointError, match="architecture"):
        load_checkpoint(MultiModalModel(ModelConfig(width=16, heads=4)), path)
    manifest, arrays = read_checkpoint(path)
    arrays["text.pos"] = arrays["text.pos"][:3]
    del arrays["itm_head.bias"]
    bad = tmp_path / "bad.npz"
    enc = {k: v for k, v in arrays.items()}
    enc["__manifest__"] = np.frombuffer(__import__("json").dumps(manifest).encode(), dtype=np.uint8)
    np.savez(bad, **enc)
    with pytest.raises(CheckpointError) as err:
        load_checkpoint(MultiModalModel(seed=0), bad)
    assert "text.pos" in str(err.value) and "itm_head.bias" in str(err.value)
