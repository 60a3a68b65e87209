import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmt import losses
from cmt import numcore as nc
from cmt.errors import ContractError
from cmt.losses import (ContrastConfig, ContrastTuple, ImprovementConfig, PretrainBatch, adaptor_loss, data_rewards,
                        infonce,
                        infonce_batch, pair_return, pair_task, pair_trajectory, predicted_reward, pretrain_loss,
                        prompt_ascent, reward_objective, sample_fragments, supervised_loss)
from cmt.numcore import RngStream, Tensor
from cmt.seqmodel import PredictionHeads, Trajectory, adaptor_apply

from gradcheck import LOSS_CASES, adaptor_case, random_traj, tiny_bundle

# ---------------------------------------------------------------- reconstruction


def test_l1_single_step_example(monkeypatch):
    b = tiny_bundle(0, discrete=False)
    tau = Trajectory(np.array([[0.0, 0.0], [1.0, 2.0]]), np.array([[1.0]]), np.array([3.0]))

    def heads(bundle, z, taus, *a, **k):
        return PredictionHeads(Tensor(np.full((1, 1, 1), 0.5)), Tensor(b.norm.rewards(np.array([[3.0]]))),
                               Tensor(b.norm.states(np.array([[[1.0, 2.0]]]))), False)

    monkeypatch.setattr(losses, "generate_heads", heads)
    assert supervised_loss(b, np.zeros((1, 2, 4)), [tau]).item() == pytest.approx(0.25, abs=1e-15)


def test_l1_zero_when_heads_exact(monkeypatch):
    b = tiny_bundle(1, discrete=False)
    rng = np.random.default_rng(0)
    taus = [random_traj(rng, 3, False) for _ in range(2)]

    def heads(bundle, z, ts, *a, **k):
        return PredictionHeads(Tensor(np.stack([t.actions for t in ts])),
                               Tensor(b.norm.rewards(np.stack([t.rewards for t in ts]))),
                               Tensor(b.norm.states(np.stack([t.states[1:] for t in ts]))), False)

    monkeypatch.setattr(losses, "generate_heads", heads)
    assert supervised_loss(b, np.zeros((2, 2, 4)), taus).item() == 0.0


def test_l1_empty_trajectory_rejected():
    b = tiny_bundle(0, discrete=True)
    empty = Trajectory(np.zeros((1, 2)), np.zeros(0, dtype=np.int64), np.zeros(0))
    with pytest.raises(ContractError):
        supervised_loss(b, np.zeros((1, 2, 4)), [empty])


@pytest.mark.parametrize("name", sorted(LOSS_CASES))
def test_loss_gradients_match_finite_differences(name):
    # the acceptance suite runs 100 configurations; a slice is enough here
    worst = max(LOSS_CASES[name](seed) for seed in range(8))
    assert worst < 1e-4


def test_imagined_adaptor_gradients_match_finite_differences():
    assert max(adaptor_case(seed, "imagined") for seed in range(4)) < 1e-4


# ---------------------------------------------------------------- InfoNCE


def _unit(v):
    return v / np.linalg.norm(v)


@pytest.mark.parametrize("K", [2, 3, 4, 17, 64, 256])
def test_infonce_equal_similarities_is_log_k(K):
    q = np.ones((1, 3))
    cands = np.tile(q, (K, 1, 1))
    assert abs(infonce(q, 0, cands, 0.2).item() - math.log(K)) < 1e-9


@settings(max_examples=25, deadline=None)
@given(K=st.integers(2, 256), temp=st.floats(0.05, 5.0), pos=st.integers(0, 255))
def test_infonce_log_k_property(K, temp, pos):
    rng = np.random.default_rng(K)
    q = rng.normal(size=(2, 3))
    assert abs(infonce(q, pos % K, np.tile(q, (K, 1, 1)) * 2.5, temp).item() - math.log(K)) < 1e-9


def test_infonce_two_candidate_value():
    # cosine 1 with the positive and 0 with the negative at temperature 1
    q = np.array([[1.0, 0.0]])
    cands = np.array([[[1.0, 0.0]], [[0.0, 1.0]]])
    val = infonce(q, 0, cands, 1.0).item()
    assert val == pytest.approx(0.313262, abs=5e-7)
    assert val == pytest.approx(math.log1p(math.exp(-1.0)), abs=1e-12)


def test_infonce_monotone_in_positive_similarity():
    q = np.array([[1.0, 0.0, 0.0]])
    neg = _unit(np.array([0.2, 1.0, 0.3]))
    vals = []
    for angle in np.linspace(1.4, 0.0, 8):
        pos = np.array([np.cos(angle), np.sin(angle), 0.0])
        vals.append(infonce(q, 0, np.stack([pos, neg])[:, None, :], 0.2).item())
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_infonce_needs_two_candidates():
    with pytest.raises(ContractError):
        infonce(np.ones((1, 2)), 0, np.ones((1, 1, 2)), 0.2)


def test_infonce_empty_tuples_contribute_zero():
    z = Tensor(np.ones((3, 1, 2)))
    assert infonce_batch(z, z, [], 0.2).item() == 0.0


def test_contrast_config_invariants():
    for kw in (dict(temperature=0.0), dict(batch_size=1), dict(return_threshold=-1.0), dict(weight=-0.1)):
        with pytest.raises(ContractError):
            ContrastConfig(**kw)
    with pytest.raises(ContractError):
        ImprovementConfig(step_size=-1.0)


# ---------------------------------------------------------------- pairing


def test_pair_return_example():
    tuples = pair_return([10.0, 10.1, 50.0], 1.0)
    first = [t for t in tuples if t.anchor == 0][0]
    assert first.positive == 1 and first.negatives == [2]
    # 50.0 has nothing within the threshold
    assert all(t.anchor != 2 for t in tuples)


def test_pair_return_degenerate():
    assert pair_return([3.0, 3.0, 3.0], 1.0) == []
    assert pair_return([1.0, 2.0, 3.0], 0.0) == []


def test_pair_task_two_by_two():
    keys = [("g", "fwd"), ("g", "fwd"), ("g", "bwd"), ("g", "bwd")]
    tuples = pair_task(keys, RngStream(0))
    assert len(tuples) == 4
    for t in tuples:
        assert keys[t.positive] == keys[t.anchor] and t.positive != t.anchor
        assert len(t.negatives) == 2 and all(keys[j] != keys[t.anchor] for j in t.negatives)


def test_pair_task_single_task_and_cross_family():
    assert pair_task([("g", "fwd")] * 3, RngStream(0)) == []
    keys = [("g", "fwd"), ("g", "fwd"), ("c", "0"), ("c", "0")]
    assert pair_task(keys, RngStream(0)) == []


def test_pair_trajectory_counts():
    plans, tuples, skipped = pair_trajectory([40] * 5, 16, RngStream(3))
    assert skipped == 0 and len(tuples) == 5
    assert all(len(t.negatives) == 4 and t.positive == t.anchor for t in tuples)
    _, tuples, _ = pair_trajectory([40], 16, RngStream(3))
    assert tuples == []


def test_pair_trajectory_excludes_short():
    plans, tuples, skipped = pair_trajectory([40, 10, 40], 16, RngStream(1))
    assert skipped == 1 and plans[1] is None
    assert {t.anchor for t in tuples} == {0, 2}


@settings(max_examples=200, deadline=None)
@given(length=st.integers(1, 120), frag=st.integers(1, 30), seed=st.integers(0, 2**31), p=st.sampled_from([0.0, 0.5]))
def test_fragments_disjoint(length, frag, seed, p):
    plan = sample_fragments(length, frag, RngStream(seed), p)
    if length < frag + 1:
        assert plan is None
        return
    (a, b), (c, d) = plan.target, plan.history
    assert b - a == frag and 0 <= a and b <= length
    assert 0 <= c <= d <= length and d - c <= frag
    assert d == c or b <= c or d <= a


# ---------------------------------------------------------------- pretrain objective


def _batch(seed, discrete, meta, B=4):
    rng = np.random.default_rng(seed)
    tasks = ["a", "a", "b", "b"][:B]
    target = [random_traj(rng, 3, discrete, 1, tasks[i]) for i in range(B)]
    history = [random_traj(rng, int(rng.integers(0, 3)), discrete, 0, tasks[i]) for i in range(B)]
    ctx = [random_traj(rng, 2, discrete, 0, tasks[i]) for i in range(B)] if meta else None
    return PretrainBatch(target, history, rng.normal(size=B), [("toy", t) for t in tasks], ctx, ctx)


def test_pretrain_gamma_zero_is_l1():
    b = tiny_bundle(3, discrete=True)
    batch = _batch(3, True, False)
    out = pretrain_loss(b, batch, ContrastConfig(weight=0.0), 0.5, RngStream(0))
    sb = batch.sorted()
    from cmt.seqmodel import encode
    l1 = supervised_loss(b, encode(b, sb.history), sb.target)
    assert out.total.item() == out.parts["L1"]
    # the joint encode pads over a wider batch, so only agreement to rounding here
    assert l1.item() == pytest.approx(out.parts["L1"], rel=1e-12)


def test_pretrain_skipped_tuples_contribute_zero():
    b = tiny_bundle(4, discrete=False)
    batch = _batch(4, False, False, B=1)
    out = pretrain_loss(b, batch, ContrastConfig(weight=0.5), 0.5, RngStream(0))
    assert out.parts["L2_traj"] == out.parts["L2_return"] == 0.0
    assert out.total.item() == out.parts["L1"]


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), meta=st.booleans())
def test_pretrain_permutation_invariant(seed, meta):
    b = tiny_bundle(seed % 5, discrete=bool(seed % 2))
    batch = _batch(seed, bool(seed % 2), meta)
    perm = np.random.default_rng(seed).permutation(len(batch))
    pick = lambda xs: None if xs is None else [xs[i] for i in perm]  # noqa: E731
    shuffled = PretrainBatch(pick(batch.target), pick(batch.history), batch.returns[perm], pick(batch.task_keys),
                             pick(batch.target_ctx), pick(batch.history_ctx))
    cfg = ContrastConfig(weight=0.3)
    a = pretrain_loss(b, batch, cfg, 0.5, RngStream(9), meta).total.item()
    c = pretrain_loss(b, shuffled, cfg, 0.5, RngStream(9), meta).total.item()
    assert a == c


# ---------------------------------------------------------------- prompt ascent


def test_ascent_zero_step_or_zero_steps_is_identity():
    z = np.random.default_rng(0).normal(size=(2, 3))

    def obj(t):
        return nc.tsum(t * t)

    assert np.array_equal(prompt_ascent(z, obj, 0.0, 5), z)
    assert np.array_equal(prompt_ascent(z, obj, 0.1, 0), z)


def test_ascent_linear_fixture():
    rng = np.random.default_rng(5)
    m, d = 4, 6
    z = rng.normal(size=(m, d))
    w = rng.normal(size=d)
    eta = 0.37

    def linear_reward(t):
        return nc.tsum(nc.mean(t, axis=0) * Tensor(w))

    out = prompt_ascent(z, linear_reward, eta, 1)
    assert np.max(np.abs(out - (z + eta * np.broadcast_to(w / m, (m, d))))) < 1e-10


def test_ascent_first_order_property():
    ups = 0
    n = 40
    for seed in range(n):
        b = tiny_bundle(seed, discrete=bool(seed % 2))
        b.freeze("encoder", "generator")
        rng = np.random.default_rng(seed)
        taus = [random_traj(rng, 3, bool(seed % 2), 0) for _ in range(3)]
        z = rng.normal(size=(2, 4))
        obj = reward_objective(b, taus)
        with nc.no_grad():
            before = obj(Tensor(z)).item()
            after = obj(Tensor(prompt_ascent(z, obj, 1e-4, 1))).item()
        ups += after >= before
    assert ups >= 0.95 * n


def test_predicted_reward_needs_equal_lengths():
    b = tiny_bundle(0, discrete=True)
    rng = np.random.default_rng(0)
    with pytest.raises(ContractError):
        predicted_reward(b, np.zeros((2, 2, 4)), [random_traj(rng, 2, True), random_traj(rng, 3, True)])


def test_rollout_name_checked():
    b = tiny_bundle(0, discrete=True)
    rng = np.random.default_rng(0)
    with pytest.raises(ContractError):
        ImprovementConfig(rollout="dream")
    with pytest.raises(ContractError):
        predicted_reward(b, np.zeros((1, 2, 4)), [random_traj(rng, 2, True)], rollout="dream")


@pytest.mark.parametrize("discrete", [False, True])
def test_data_rewards_ignore_recorded_last_action(discrete):
    # the last recorded action is replaced before any reward is read from it
    b = tiny_bundle(4, discrete)
    rng = np.random.default_rng(4)
    tau = random_traj(rng, 3, discrete, 1)
    other = Trajectory(tau.states, tau.actions.copy(), tau.rewards, tau.t0, tau.task, tau.env)
    other.actions[-1] = (tau.actions[-1] + 1) % 3 if discrete else -tau.actions[-1]
    z = rng.normal(size=(1, 2, 4))
    r1, r2 = data_rewards(b, z, [tau]).data, data_rewards(b, z, [other]).data
    assert r1.shape == (1, 3)
    np.testing.assert_allclose(r1, r2, rtol=0, atol=1e-12)
    h1 = losses.generate_heads(b, nc.Tensor(z), [tau]).reward.data
    h2 = losses.generate_heads(b, nc.Tensor(z), [other]).reward.data
    assert not np.allclose(h1[..., -1], h2[..., -1])


def test_data_rollout_uses_most_recent_steps():
    b = tiny_bundle(5, discrete=True)
    rng = np.random.default_rng(5)
    taus = [random_traj(rng, 4, True, 2) for _ in range(2)]
    z = rng.normal(size=(2, 2, 4))
    full = predicted_reward(b, z, [t.recent(2) for t in taus]).data
    np.testing.assert_allclose(predicted_reward(b, z, taus, horizon=2).data, full, rtol=1e-12)


# ---------------------------------------------------------------- adaptor objective


def test_adaptor_identity_has_zero_constraint():
    b = tiny_bundle(2, discrete=True)
    for p in b.parameters("adaptor"):
        p.data = np.zeros_like(p.data)
    b.freeze("encoder", "generator")
    rng = np.random.default_rng(2)
    out = adaptor_loss(b, rng.normal(size=(2, 2, 4)), [random_traj(rng, 2, True) for _ in range(2)], 1.0)
    assert out.parts["drift"] == 0.0


def test_adaptor_loss_requires_freeze():
    b = tiny_bundle(0, discrete=False)
    rng = np.random.default_rng(0)
    with pytest.raises(ContractError):
        adaptor_loss(b, np.zeros((1, 2, 4)), [random_traj(rng, 2, False)], 1.0)


def test_adaptor_gradient_only_reaches_adaptor():
    b = tiny_bundle(6, discrete=True)
    b.freeze("encoder", "generator")
    rng = np.random.default_rng(6)
    out = adaptor_loss(b, rng.normal(size=(2, 2, 4)), [random_traj(rng, 2, True) for _ in range(2)], 0.5)
    nc.zero_grad([p for _, p in b.named_parameters()])
    nc.backward(out.total)
    for c in ("encoder", "generator"):
        for p in b.parameters(c):
            assert p.grad is None or not np.any(p.grad)
    assert any(p.grad is not None and np.any(p.grad) for p in b.parameters("adaptor"))


def test_huge_behavior_weight_keeps_adaptor_near_identity():
    b = tiny_bundle(8, discrete=False, scale=0.3)
    for p in b.parameters("adaptor"):
        p.data = np.zeros_like(p.data)
    b.freeze("encoder", "generator")
    rng = np.random.default_rng(8)
    z = rng.normal(size=(3, 2, 4))
    taus = [random_traj(rng, 2, False) for _ in range(3)]
    opt = nc.AdamW(b.parameters("adaptor"), lr=1e-3, weight_decay=0.0, clip_norm=None)
    for step in range(300):
        if step == 200:
            opt.lr = 1e-5
        out = adaptor_loss(b, z, taus, 1e6, horizon=2)
        opt.zero_grad()
        nc.backward(out.total)
        opt.step()
    with nc.no_grad():
        gap = adaptor_apply(b, z).data - z
    assert np.max(np.linalg.norm(gap.reshape(3, -1), axis=1)) < 1e-3
