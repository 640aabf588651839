"""Built-in oracle checks behind the `selftest` CLI subcommand.

Each check recomputes a core quantity through an independent route
(finite differences, enumeration, all-pairs loops) at a scale that runs
in seconds; the pytest suite covers the same ground more thoroughly.
"""
from __future__ import annotations

import itertools
import math

import numpy as np

from . import defenses, nn, polar
from .data import LabeledDataset
from .rng import substream


def _random_batch(rng, n_layers: int, k: int) -> polar.RewardBatch:
    masks = (rng.random((k, n_layers)) < 0.5).astype(np.int8)
    rewards = rng.uniform(-1.0, 1.0, size=k)
    return polar.RewardBatch(masks, rewards, baseline_bsr=0.5)


def check_policy_gradient_fd():
    rng = substream(101)
    for _ in range(20):
        n = int(rng.integers(1, 8))
        theta = rng.uniform(-3, 3, size=n)
        batch = _random_batch(rng, n, int(rng.integers(1, 20)))
        penalty = float(rng.uniform(0, 20))
        policy = polar.PolicyState(theta)
        grad = polar.policy_gradient(policy, batch, penalty)
        h = 1e-5
        for l in range(n):
            e = np.zeros(n)
            e[l] = h
            fd = (
                polar.policy_loss(polar.PolicyState(theta + e), batch, penalty)
                - polar.policy_loss(polar.PolicyState(theta - e), batch, penalty)
            ) / (2 * h)
            if abs(fd - grad[l]) > 1e-6:
                raise AssertionError(f"gradient mismatch {abs(fd - grad[l]):.2e} at layer {l}")


def check_log_prob_normalization():
    theta = substream(102).uniform(-2, 2, size=4)
    policy = polar.PolicyState(theta)
    total = sum(
        math.exp(polar.selection_log_prob(policy, np.array(bits)))
        for bits in itertools.product((0, 1), repeat=4)
    )
    if abs(total - 1.0) > 1e-10:
        raise AssertionError(f"mask probabilities sum to {total}")


def check_sampling_factorization():
    theta = np.array([0.3, -0.4, 0.1])
    policy = polar.PolicyState(theta)
    draws = polar.sample_actions(policy, 20000, seed=103)
    tv = 0.0
    for bits in itertools.product((0, 1), repeat=3):
        emp = np.all(draws == np.array(bits), axis=1).mean()
        true = math.exp(polar.selection_log_prob(policy, np.array(bits)))
        tv += abs(emp - true)
    if tv / 2 > 0.03:
        raise AssertionError(f"total variation {tv / 2:.4f} above 0.03")


def check_nn_gradient_fd():
    arch = nn.ArchSpec(
        (nn.LayerSpec("a", 3, 1, "relu"), nn.LayerSpec("b", 1, 2, "identity"))
    )
    model = nn.init_model(arch, seed=104)
    rng = substream(105)
    data = LabeledDataset(rng.random((10, 3)), rng.integers(0, 2, size=10), 2)
    _, grads = nn.loss_and_gradients(model, data)
    flat_grad = grads.flat()
    base = np.concatenate([np.concatenate([w.ravel(), b]) for w, b in zip(model.weights, model.biases)])
    h = 1e-5
    for i in range(base.size):
        up, down = base.copy(), base.copy()
        up[i] += h
        down[i] -= h
        lp = nn.dataset_loss(_from_flat(arch, up), data)
        lm = nn.dataset_loss(_from_flat(arch, down), data)
        fd = (lp - lm) / (2 * h)
        denom = max(abs(fd), 1e-8)
        if abs(fd - flat_grad[i]) / denom > 1e-4:
            raise AssertionError(f"nn gradient mismatch at parameter {i}")


def _from_flat(arch, vec):
    u = nn.UpdateVector.from_flat(arch, vec)
    return nn.ModelParams(arch, u.weights, u.biases)


def _updates_from_rows(rows) -> list[defenses.ClientUpdate]:
    arch = nn.mlp_arch(2, (2,), 2)
    pad = np.zeros((len(rows), arch.num_params))
    pad[:, : rows.shape[1]] = rows
    return [
        defenses.ClientUpdate(i, False, nn.UpdateVector.from_flat(arch, pad[i]))
        for i in range(len(rows))
    ]


def check_multikrum_outlier():
    rng = substream(106)
    for trial in range(20):
        rows = rng.normal(0, 1, size=(10, 8))
        benign_norm = float(np.linalg.norm(rows[:9], axis=1).mean())
        rows[9] = rows[9] / np.linalg.norm(rows[9]) * 10 * benign_norm
        res = defenses.multikrum(_updates_from_rows(rows), f=2, m=4)
        if 9 in res.accepted_ids:
            raise AssertionError(f"outlier accepted in trial {trial}")


def check_rlr_flips():
    rows = np.ones((10, 4))
    rows[:6, 1] *= -1  # agreement |4 - 6| = 2 < 4 -> flipped
    rows[:5, 2] *= -1  # agreement 0 < 4 -> flipped
    res = defenses.rlr(_updates_from_rows(rows), threshold=4, server_lr=1.0)
    agg = res.aggregate.flat()[:4]
    mean = rows.mean(axis=0)
    expected = np.array([mean[0], -mean[1], -mean[2], mean[3]])
    if not np.allclose(agg, expected):
        raise AssertionError(f"rlr aggregate {agg} != {expected}")


def check_fltrust_rejects_nonpositive():
    arch = nn.mlp_arch(2, (2,), 2)
    ref = np.zeros(arch.num_params)
    ref[0] = 1.0
    rows = np.zeros((3, arch.num_params))
    rows[0, 0] = 2.0    # aligned
    rows[1, 0] = -1.0   # opposite
    rows[2, 1] = 1.0    # orthogonal
    updates = [defenses.ClientUpdate(i, False, nn.UpdateVector.from_flat(arch, rows[i])) for i in range(3)]
    res = defenses.fltrust(updates, nn.UpdateVector.from_flat(arch, ref))
    if res.per_client_weight[1] != 0.0 or res.per_client_weight[2] != 0.0:
        raise AssertionError("non-positive cosine update received weight")
    if 0 not in res.accepted_ids or 1 in res.accepted_ids or 2 in res.accepted_ids:
        raise AssertionError("fltrust acceptance set wrong")


def check_flame_outlier():
    rng = substream(107)
    base = rng.normal(0, 1, size=8)
    rows = np.stack([base + rng.normal(0, 0.05, size=8) for _ in range(9)] + [-base])
    res = defenses.flame(_updates_from_rows(rows), min_cluster=6, noise_sigma=0.0)
    if 9 in res.accepted_ids:
        raise AssertionError("cosine-opposite outlier accepted")


def check_determinism():
    from .attacks import AttackStrategy
    from .sim import DataSpec, SimConfig, run_experiment

    cfg = SimConfig(total_clients=12, clients_per_round=4, rounds=2, seed=9,
                    malicious_fraction=0.25)
    spec = DataSpec(per_class=40, test_per_class=20)
    strat = AttackStrategy(kind="polar", polar=polar.PolarConfig(samples_per_step=4, steps=2))
    a = run_experiment(cfg, defenses.DefenseConfig("fedavg"), strat, spec, (8, 8))
    b = run_experiment(cfg, defenses.DefenseConfig("fedavg"), strat, spec, (8, 8))
    for ra, rb in zip(a.records, b.records):
        same = (
            ra.acc == rb.acc and ra.bsr == rb.bsr and ra.mask == rb.mask
            and ra.accepted_ids == rb.accepted_ids and ra.policy_logits == rb.policy_logits
        )
        if not same:
            raise AssertionError(f"round {ra.round} differs between identical runs")


CHECKS = [
    ("policy-gradient vs finite differences", check_policy_gradient_fd),
    ("selection log-prob normalization", check_log_prob_normalization),
    ("bernoulli sampling factorization", check_sampling_factorization),
    ("network gradient vs finite differences", check_nn_gradient_fd),
    ("multikrum outlier rejection", check_multikrum_outlier),
    ("rlr sign flipping", check_rlr_flips),
    ("fltrust non-positive cosine rejection", check_fltrust_rejects_nonpositive),
    ("flame cosine-opposite rejection", check_flame_outlier),
    ("experiment determinism", check_determinism),
]
