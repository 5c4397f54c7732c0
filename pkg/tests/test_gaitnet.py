import numpy as np
import pytest

from gaitqat import tensor as tn
from gaitqat.errors import ConfigError, DimensionError
from gaitqat.gaitnet import GaitNet, ModelSpec, QuantPolicy, detach_quantizers, horizontal_pool, set_pool
from gaitqat.synthdata import stack_frames
from gaitqat.tensor import Tensor


@pytest.fixture(scope="module")
def frames(small_split):
    return stack_frames(small_split.train[:6])


def test_output_shapes(frames):
    m = GaitNet(seed=0)
    feats = m.backbone_forward(frames)
    assert feats.shape == (6, 8, 16, 8, 6)
    x, o = m(frames)
    assert x.shape == (6, 4, 32) and o.shape == (6, 4, 16)


def test_bad_input_shape():
    with pytest.raises(DimensionError):
        GaitNet(seed=0).backbone_forward(np.zeros((2, 8, 1, 30, 24)))


def test_zero_input_biases_only():
    m = GaitNet(seed=0)
    for layer in (m.conv1, m.conv2):
        layer.bias.data[...] = np.linspace(-0.2, 0.3, layer.bias.size)
    out = m.backbone_forward(np.zeros((1, 4, 1, 32, 24))).data
    # conv1 on zeros gives its bias; conv2 sees relu(bias) through zero padding, so the interior is constant
    inner = out[0, :, :, 1:-1, 1:-1]
    assert np.allclose(inner, inner[:1, :, :1, :1])
    assert np.array_equal(out, m.backbone_forward(np.zeros((1, 4, 1, 32, 24))).data)


def test_staged_composition_exact(frames):
    m = GaitNet(ModelSpec(quant=QuantPolicy(4, 4)), seed=1).eval()
    staged = m.heads_forward(horizontal_pool(set_pool(m.backbone_forward(frames)), m.spec.n_parts))
    assert np.array_equal(staged.data, m.embed(frames).data)


def test_full_precision_equals_detached(frames):
    m = GaitNet(seed=2)
    plain = detach_quantizers(m)
    assert np.array_equal(m.embed(frames).data, plain.embed(frames).data)


def test_set_pool_properties():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 1, 3, 4, 4))
    assert np.array_equal(set_pool(Tensor(x)).data, x[:, 0])
    y = rng.normal(size=(2, 5, 3, 4, 4))
    assert np.array_equal(set_pool(Tensor(y)).data, set_pool(Tensor(y[:, ::-1])).data)
    pos = np.abs(y[:, :1])
    assert np.array_equal(set_pool(Tensor(np.concatenate([np.zeros_like(pos), pos], axis=1))).data, pos[:, 0])


def test_horizontal_pool_against_loop_oracle():
    x = np.random.default_rng(1).normal(size=(1, 2, 4, 3))
    p = 2
    ref = np.zeros((1, p, 2))
    for c in range(2):
        for j in range(p):
            strip = x[0, c, j * 2:(j + 1) * 2, :]
            ref[0, j, c] = strip.max() + strip.mean()
    assert np.array_equal(horizontal_pool(Tensor(x), p).data, ref)


def test_horizontal_pool_degenerate_cases():
    x = np.random.default_rng(2).normal(size=(2, 3, 4, 3))
    glob = x.reshape(2, 3, -1)
    assert np.allclose(horizontal_pool(Tensor(x), 1).data[:, 0], glob.max(-1) + glob.mean(-1))
    assert np.allclose(horizontal_pool(Tensor(np.full((1, 2, 4, 3), 0.7)), 4).data, 1.4)
    with pytest.raises(ConfigError):
        horizontal_pool(Tensor(x), 3)


def test_heads_zero_input_and_part_independence():
    m = GaitNet(seed=3)
    assert not m.heads_forward(Tensor(np.zeros((2, 4, 16)))).data.any()
    pooled = np.random.default_rng(3).normal(size=(2, 4, 16))
    base = m.heads_forward(Tensor(pooled)).data
    bumped = pooled.copy()
    bumped[:, 2] += 1.0
    diff = np.abs(m.heads_forward(Tensor(bumped)).data - base).sum(axis=(0, 2))
    assert diff[2] > 0 and np.all(np.delete(diff, 2) == 0)


def test_bnneck_eval_identity_normalisation():
    m = GaitNet(seed=4).eval()
    x = np.random.default_rng(4).normal(size=(3, 4, 32))
    m.bnneck.running_mean[...] = 0.0
    m.bnneck.running_var[...] = 1.0 - 1e-5  # batch_norm adds eps = 1e-5
    logits = m.bnneck_logits(Tensor(x)).data
    ref = np.einsum("bpd,pdc->bpc", x, m.classifier.weight.data)
    assert np.allclose(logits, ref, atol=1e-12)


def test_training_batch_of_one_rejected(frames):
    from gaitqat.errors import NumericError
    with pytest.raises(NumericError):
        GaitNet(seed=0)(frames[:1])


def test_spec_validation():
    with pytest.raises(ConfigError):
        GaitNet(ModelSpec(n_parts=3), seed=0)


def test_spec_roundtrip():
    spec = ModelSpec(quant=QuantPolicy(4, 4, boundary_bits=8))
    assert ModelSpec.from_dict(spec.to_dict()) == spec


def test_monotone_fidelity_post_hoc(small_split):
    from gaitqat.experiments import DeskBudget, train_fp
    fp, _ = train_fp(small_split, seed=0, budget=DeskBudget(fp_iters=150))
    fp.eval()
    frames = stack_frames(small_split.probe[:8])
    calib = stack_frames(small_split.train[:16])
    with tn.no_grad():
        ref = fp.embed(frames).data
        errs = []
        for b in (4, 8, 16):
            q = fp.requantize(QuantPolicy(b, b)).eval()
            q.embed(calib)  # steps initialised from a calibration batch
            errs.append(float(np.abs(q.embed(frames).data - ref).mean()))
    assert errs[0] >= errs[1] >= errs[2]
