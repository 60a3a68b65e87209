import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmt import numcore as nc
from cmt.envs import EnvSpec, generate_dataset
from cmt.errors import CheckpointError, ContractError
from cmt.numcore import Tensor
from cmt.pipeline import model_config_for
from cmt.seqmodel import (ACTION, PAD, REWARD, SEP, STATE, ModelBundle, ModelConfig, Normalizer, TokenBatch,
                          Trajectory, adaptor_apply, embed_trajectory, encode, generate_heads, prefix_causal_mask,
                          tokenize)

from gradcheck import numeric_grad, rel_error


def fd_param(param, loss):
    def f(x):
        old, param.data = param.data, x
        try:
            return loss().item()
        finally:
            param.data = old

    return numeric_grad(f, param.data)


def traj(n, sd=2, ad=1, discrete=False, seed=0, t0=0):
    rng = np.random.default_rng(seed)
    acts = rng.integers(0, ad, n) if discrete else rng.normal(size=(n, ad))
    return Trajectory(rng.normal(size=(n + 1, sd)), acts, rng.normal(size=n), t0)


def small_cfg(discrete=False, **kw):
    base = dict(state_dim=2, action_dim=3 if discrete else 1, discrete_actions=discrete, embed_dim=16,
                layers=2, heads=2, prompt_len=3)
    base.update(kw)
    return ModelConfig(**base)


# ---------------------------------------------------------------- tokenization


def test_interleaved_layout():
    cfg = small_cfg()
    seq = embed_trajectory(traj(3), None, cfg)
    assert len(seq) == 9
    assert seq.modality.tolist() == [STATE, ACTION, REWARD] * 3
    assert seq.time.tolist() == [0, 0, 0, 1, 1, 1, 2, 2, 2]
    assert seq.sep_index is None


def test_context_layout_with_sep():
    cfg = small_cfg()
    seq = embed_trajectory(traj(2, t0=5), traj(2, seed=1), cfg)
    assert len(seq) == 13
    assert seq.sep_index == 6
    assert (seq.modality == SEP).sum() == 1
    assert seq.time[7:].tolist() == [5, 5, 5, 6, 6, 6]


def test_empty_tau_with_context():
    cfg = small_cfg()
    empty = Trajectory(np.zeros((1, 2)), np.zeros((0, 1)), np.zeros(0))
    seq = embed_trajectory(empty, traj(2), cfg)
    assert len(seq) == 7 and seq.modality[-1] == SEP


def test_discrete_action_one_hot_slot():
    cfg = small_cfg(discrete=True)
    t = traj(2, discrete=True, ad=3)
    seq = embed_trajectory(t, None, cfg)
    act_rows = seq.features[1::3]
    assert np.array_equal(act_rows[:, 2:5], np.eye(3)[t.actions])


def test_long_trajectory_keeps_recent_steps():
    cfg = small_cfg(max_horizon=4)
    seq = embed_trajectory(traj(6), None, cfg)
    assert len(seq) == 12
    assert seq.time.max() == 3  # positions clip at max_horizon - 1


def test_collate_pads():
    cfg = small_cfg()
    batch = TokenBatch.collate([embed_trajectory(traj(1), None, cfg), embed_trajectory(traj(2), None, cfg)],
                               cfg.input_dim)
    assert batch.features.shape == (2, 6, cfg.input_dim)
    assert batch.valid.sum(1).tolist() == [3, 6]
    assert (batch.modality[0, 3:] == PAD).all()


def test_config_validation():
    with pytest.raises(ContractError):
        ModelConfig(2, 1, False, embed_dim=15, heads=2)
    with pytest.raises(ContractError):
        ModelConfig(2, 1, False, prompt_len=0)


# ---------------------------------------------------------------- encoder


def test_encoder_deterministic_and_shape():
    b = ModelBundle(small_cfg(), 3)
    for n in (1, 5, 32):
        z1 = encode(b, traj(n)).data
        z2 = encode(b, traj(n)).data
        assert z1.shape == (3, 16)
        assert np.array_equal(z1, z2)


def test_empty_history_gives_z0():
    b = ModelBundle(small_cfg(), 3)
    empty = Trajectory(np.zeros((1, 2)), np.zeros((0, 1)), np.zeros(0))
    z = encode(b, [empty, traj(2)]).data
    assert np.array_equal(z[0], b.encoder.z0.data)
    assert not np.array_equal(z[1], b.encoder.z0.data)


def test_padding_does_not_leak():
    b = ModelBundle(small_cfg(), 4)
    short = traj(2, seed=1)
    alone = encode(b, [short]).data[0]
    padded = encode(b, [short, traj(7, seed=2)]).data[0]
    np.testing.assert_allclose(alone, padded, rtol=0, atol=1e-12)


def test_swapping_triples_changes_prompt():
    b = ModelBundle(small_cfg(), 5)
    t = traj(4, seed=3)
    order = [1, 0, 2, 3]
    swapped = Trajectory(np.concatenate([t.states[order], t.states[4:]]), t.actions[order], t.rewards[order])
    z = encode(b, t).data.ravel()
    zs = encode(b, swapped).data.ravel()
    cos = z @ zs / np.linalg.norm(z) / np.linalg.norm(zs)
    assert cos < 1 - 1e-6


def test_encoder_is_bidirectional():
    b = ModelBundle(small_cfg(), 6)
    cfg = b.config
    t = traj(4, seed=4)
    batch = tokenize(b, [t])
    x = b.encoder.embed(batch)
    mask = np.zeros((1, 1, 1, batch.valid.shape[1]))
    h0 = b.encoder.blocks[0](x, mask).data
    later = t.rewards.copy()
    later[-1] += 1.0
    t2 = Trajectory(t.states, t.actions, later)
    h1 = b.encoder.blocks[0](b.encoder.embed(tokenize(b, [t2])), mask).data
    # the first token's state changes when the last token changes
    assert not np.array_equal(h0[0, 0], h1[0, 0])
    assert cfg.layers >= 1


# ---------------------------------------------------------------- generator


def test_prefix_causal_mask_pattern():
    m = prefix_causal_mask(2, 3)
    allowed = m == 0
    assert allowed[:, :2].all()
    assert not allowed[:2, 2:].any()
    assert np.array_equal(allowed[2:, 2:], np.tril(np.ones((3, 3), dtype=bool)))


@pytest.mark.parametrize("discrete", [False, True])
def test_generator_causality_exact(discrete):
    cfg = small_cfg(discrete)
    b = ModelBundle(cfg, 7)
    rng = np.random.default_rng(0)
    z = rng.normal(size=(cfg.prompt_len, cfg.embed_dim))
    t = traj(5, ad=cfg.action_dim, discrete=discrete, seed=5)
    base = generate_heads(b, z, [t])
    for k in range(1, 5):
        # perturb everything from step k on: states, actions and rewards
        s = t.states.copy()
        s[k:] += 1.7
        a = t.actions.copy()
        if discrete:
            a[k:] = (a[k:] + 1) % cfg.action_dim
        else:
            a[k:] -= 0.9
        r = t.rewards.copy()
        r[k:] *= -3.0
        pert = generate_heads(b, z, [Trajectory(s, a, r)])
        assert np.array_equal(pert.action.data[:, :k], base.action.data[:, :k])
        assert np.array_equal(pert.reward.data[:, :k], base.reward.data[:, :k])
        assert np.array_equal(pert.next_state.data[:, :k - 1], base.next_state.data[:, :k - 1])
        assert not np.array_equal(pert.action.data[:, k], base.action.data[:, k])


def test_same_step_reward_sees_its_action_only():
    cfg = small_cfg()
    b = ModelBundle(cfg, 8)
    z = np.random.default_rng(1).normal(size=(cfg.prompt_len, cfg.embed_dim))
    t = traj(3, seed=6)
    base = generate_heads(b, z, [t])
    r = t.rewards.copy()
    r[1] += 5.0
    pert = generate_heads(b, z, [Trajectory(t.states, t.actions, r)])
    # action and reward of step 1 are read before r_1 is seen
    assert np.array_equal(pert.action.data[:, 1], base.action.data[:, 1])
    assert np.array_equal(pert.reward.data[:, 1], base.reward.data[:, 1])
    assert not np.array_equal(pert.next_state.data[:, 1], base.next_state.data[:, 1])


def test_prompt_prefix_visible_everywhere():
    cfg = small_cfg()
    b = ModelBundle(cfg, 9)
    z = Tensor(np.random.default_rng(2).normal(size=(cfg.prompt_len, cfg.embed_dim)), requires_grad=True)
    heads = generate_heads(b, z, [traj(4, seed=7)])
    n = heads.action.shape[1]
    for t in range(n):
        for part in (heads.action[:, t], heads.reward[:, t]):
            (g,) = nc.grad_of(nc.tsum(part), [z])
            assert np.abs(g).max() > 0
    # any single prompt vector perturbation reaches the first head
    for i in range(cfg.prompt_len):
        zp = z.data.copy()
        zp[i] += 0.5
        assert not np.array_equal(generate_heads(b, zp, [traj(4, seed=7)]).action.data[:, 0],
                                  heads.action.data[:, 0])


def test_discrete_head_probabilities():
    cfg = small_cfg(True)
    b = ModelBundle(cfg, 10)
    heads = generate_heads(b, np.zeros((cfg.prompt_len, cfg.embed_dim)), [traj(3, ad=3, discrete=True)])
    p = heads.action_probs
    assert p.shape == (1, 3, 3)
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-9)
    with pytest.raises(ContractError):
        generate_heads(ModelBundle(small_cfg(), 0), np.zeros((3, 16)), [traj(2)]).action_probs


def test_generator_rejects_ragged_batch():
    b = ModelBundle(small_cfg(), 0)
    with pytest.raises(ContractError):
        generate_heads(b, np.zeros((3, 16)), [traj(2), traj(3)])


def test_current_state_token_drives_next_action():
    cfg = small_cfg()
    b = ModelBundle(cfg, 11)
    z = np.random.default_rng(3).normal(size=(cfg.prompt_len, cfg.embed_dim))
    t = traj(2, seed=8)
    h1 = generate_heads(b, z, [t], current_states=[np.array([0.0, 0.0])])
    h2 = generate_heads(b, z, [t], current_states=[np.array([1.0, -1.0])])
    assert h1.action.shape[1] == 3
    assert np.array_equal(h1.action.data[:, :2], h2.action.data[:, :2])
    assert not np.array_equal(h1.action.data[:, 2], h2.action.data[:, 2])


# ---------------------------------------------------------------- adaptor


@settings(max_examples=20, deadline=None)
@given(m=st.integers(1, 5), heads=st.sampled_from([1, 2, 4]), width=st.integers(1, 4), seed=st.integers(0, 999))
def test_adaptor_identity_at_init(m, heads, width, seed):
    d = heads * width * 2
    b = ModelBundle(ModelConfig(2, 1, False, embed_dim=d, heads=heads, prompt_len=m), seed)
    z = np.random.default_rng(seed).normal(size=(3, m, d))
    out = adaptor_apply(b, z).data
    assert out.shape == z.shape
    assert np.array_equal(out, z)


def test_adaptor_drift_gradient_matches_fd():
    b = ModelBundle(small_cfg(), 12)
    rng = np.random.default_rng(4)
    for p in b.adaptor.parameters():
        p.data = rng.normal(0, 0.3, p.shape)
    z = Tensor(rng.normal(size=(2, 3, 16)))
    params = b.adaptor.parameters()

    def loss():
        return nc.tsum((adaptor_apply(b, z) - z) * (adaptor_apply(b, z) - z))

    grads = nc.grad_of(loss(), params)
    for p, g in zip(params, grads):
        assert rel_error(g, fd_param(p, loss)) < 1e-4


# ---------------------------------------------------------------- bundle


def test_freeze_flags_and_params():
    b = ModelBundle(small_cfg(), 0)
    b.freeze("encoder", "generator")
    assert b.frozen == {"encoder": True, "generator": True, "adaptor": False}
    assert all(p.requires_grad is False for p in b.parameters("encoder", "generator"))
    assert b.trainable_parameters() == b.parameters("adaptor")
    b.unfreeze("encoder")
    assert all(p.requires_grad for p in b.parameters("encoder"))


def test_bundle_seed_determinism():
    a = ModelBundle(small_cfg(), 5).snapshot()
    c = ModelBundle(small_cfg(), 5).snapshot()
    d = ModelBundle(small_cfg(), 6).snapshot()
    assert all(np.array_equal(a[k], c[k]) for k in a)
    assert any(not np.array_equal(a[k], d[k]) for k in a)


def test_load_arrays_rejects_shape_mismatch_without_partial_load():
    b = ModelBundle(small_cfg(), 1)
    before = b.snapshot()
    arrays = ModelBundle(small_cfg(), 2).snapshot()
    key = sorted(arrays)[-1]
    arrays[key] = np.zeros(arrays[key].shape + (1,))
    with pytest.raises(CheckpointError):
        b.load_arrays(arrays)
    after = b.snapshot()
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_copy_is_independent():
    b = ModelBundle(small_cfg(), 1)
    c = b.copy()
    c.adaptor.parameters()[0].data += 1.0
    assert not np.array_equal(b.adaptor.parameters()[0].data, c.adaptor.parameters()[0].data)


def test_normalizer_identity_for_one_hot_families():
    ds = generate_dataset(EnvSpec("gridgoal"), "mixed", 5, 0)
    n = Normalizer.fit(ds.episodes, True)
    assert np.array_equal(n.state_mean, np.zeros(9)) and np.array_equal(n.state_std, np.ones(9))
    ds = generate_dataset(EnvSpec("pointline_vel"), "mixed", 5, 0)
    n = Normalizer.fit(ds.episodes, False)
    s = np.concatenate([e.states for e in ds.episodes])
    np.testing.assert_allclose(n.states(s).mean(0), 0, atol=1e-9)


def test_model_config_for_env():
    cfg = model_config_for(EnvSpec("gridgoal"))
    assert (cfg.state_dim, cfg.action_dim, cfg.discrete_actions) == (9, 3, True)
    assert cfg.embed_dim == 32 and cfg.layers == 2 and cfg.heads == 2
