import itertools

import numpy as np
import pytest

from gaitqat.errors import ConfigError, UsageError
from gaitqat.synthdata import (CARRY, DILATE, NONE, DatasetConfig, IdentitySpec, SilhouetteSequence, apply_covariate,
                               carry_box, draw_identities, generate_dataset, generate_from_config, load_dataset,
                               render_sequence, save_dataset)


def all_sequences(split):
    return split.train + split.gallery + split.probe


def test_same_seed_byte_identical(small_split):
    again = generate_from_config(small_split.config)
    for a, b in zip(all_sequences(small_split), all_sequences(again)):
        assert a.frames.tobytes() == b.frames.tobytes()
        assert (a.identity, a.seq_id, a.covariate) == (b.identity, b.seq_id, b.covariate)


def test_different_seed_differs(small_split):
    from dataclasses import replace
    other = generate_from_config(replace(small_split.config, seed=4))
    assert any(a.frames.tobytes() != b.frames.tobytes()
               for a, b in zip(all_sequences(small_split), all_sequences(other)))


def test_binary_and_foreground_fraction(small_split):
    for s in all_sequences(small_split):
        assert set(np.unique(s.frames)) <= {0, 1}
        frac = s.frames.reshape(s.frames.shape[0], -1).mean(axis=1)
        assert np.all((frac >= 0.05) & (frac <= 0.6))


def test_split_structure(small_split):
    cfg = small_split.config
    assert set(small_split.train_ids).isdisjoint(small_split.eval_ids)
    assert {s.identity for s in small_split.gallery} == {s.identity for s in small_split.probe}
    assert {s.identity for s in small_split.gallery} == set(small_split.eval_ids)
    assert len(small_split.train) == cfg.n_ids * cfg.seqs_per_id
    assert small_split.train[0].frames.shape == (cfg.T, 1, cfg.H, cfg.W)


def test_noise_flips_at_most_one_percent():
    spec = IdentitySpec.draw(0, 0)
    clean = render_sequence(0, spec, 0, 8, 32, 24, 0.0, 0.0, 0.0)
    noisy = render_sequence(0, spec, 0, 8, 32, 24, 0.01, 0.0, 0.0)
    assert (clean != noisy).mean() <= 0.01


def test_inter_identity_distance_exceeds_intra():
    split = generate_dataset(seed=11, n_ids=4, seqs_per_id=4, n_eval_ids=2, covariate_rate=0.0)
    means = {}
    for s in split.train:
        means.setdefault(s.identity, []).append(s.frames.astype(float).mean(axis=0).ravel())
    intra = [np.linalg.norm(a - b) for v in means.values() for a, b in itertools.combinations(v, 2)]
    inter = [np.linalg.norm(a - b) for i, j in itertools.combinations(means, 2) for a in means[i] for b in means[j]]
    assert np.mean(inter) > np.mean(intra)


def test_identity_separation():
    specs = draw_identities(0, 24, 0.45)
    u = np.array([s.unit_vector() for s in specs])
    d = np.linalg.norm(u[:, None] - u[None], axis=-1) + np.eye(len(u)) * 10
    assert d.min() >= 0.45
    with pytest.raises(ConfigError):
        draw_identities(0, 50, 0.99)


def test_covariates():
    seq = generate_dataset(seed=1, n_ids=4, seqs_per_id=2, covariate_rate=0.0).train[0]
    assert apply_covariate(seq, NONE) is seq
    dil = apply_covariate(seq, DILATE)
    assert np.all(dil.frames.sum(axis=(1, 2, 3)) >= seq.frames.sum(axis=(1, 2, 3)))
    assert set(np.unique(dil.frames)) <= {0, 1}
    car = apply_covariate(seq, CARRY)
    for t in range(seq.frames.shape[0]):
        y0, y1, x0, x1 = carry_box(seq.frames[t, 0])
        box = seq.frames[t, 0, y0:y1, x0:x1]
        added = int(car.frames[t].sum()) - int(seq.frames[t].sum())
        assert added == box.size - int(box.sum())
    with pytest.raises(UsageError):
        apply_covariate(seq, "umbrella")


def test_non_binary_frames_rejected():
    with pytest.raises(ConfigError):
        SilhouetteSequence(np.full((4, 1, 16, 12), 2, dtype=np.uint8), 0, 0)


@pytest.mark.parametrize("kwargs", [dict(n_ids=3), dict(seqs_per_id=1), dict(H=8), dict(T=2),
                                    dict(covariate_rate=1.5), dict(noise_rate=0.2)])
def test_invalid_configs(kwargs):
    with pytest.raises(ConfigError):
        generate_from_config(DatasetConfig(**kwargs))


def test_save_load_roundtrip(tmp_path, small_split):
    save_dataset(small_split, tmp_path / "d", {"config_hash": "abc", "seed": 3})
    back = load_dataset(tmp_path / "d")
    assert back.config == small_split.config
    for a, b in zip(all_sequences(small_split), all_sequences(back)):
        assert np.array_equal(a.frames, b.frames) and a.covariate == b.covariate
    manifest = (tmp_path / "d" / "manifest.json").read_text()
    assert '"config_hash": "abc"' in manifest and '"seed": 3' in manifest
