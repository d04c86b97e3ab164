import numpy as np
import pytest
import torch

from acids.adapter import AdaptConfig, adapt, adaptation_loss, prepare_target
from acids.datagen import DomainSpec, GeneratorSpec, VectorStyle, generate
from acids.encoder import LayerSpec, ModelConfig, init_model, paired_forward, parameter_digest, register_domain
from acids.errors import ContractViolation, InvalidConfig
from acids.prob_core import SmoothedJointState
from fdcheck import central_difference, max_relative_error


def model_with_target(seed=0, dtype=torch.float64):
    model = init_model(ModelConfig(input_shape=(4,), trunk=[LayerSpec(5), LayerSpec(5)], n_clusters=3,
                                   n_overclusters=6, n_head_replicas=2, seed=seed))
    for d in (0, 1):
        register_domain(model, d)
        model.source_domains.append(d)
    register_domain(model, 7)
    with torch.no_grad():
        for lin in model.heads["main"]:
            lin.weight.mul_(6.0)  # spread confidences so some rows pass the threshold
    return model.to(dtype)


def mixed_batch(model, seed=0, n=12):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 4)) * 2
    xp = x + 0.2 * rng.normal(size=x.shape)
    with torch.no_grad():
        z, _ = paired_forward(model, x, xp, 7)
    top = np.sort(z.max(-1).values.numpy().ravel())
    # threshold in the widest gap near the middle so finite differences never flip a row
    mid = len(top) // 2
    gaps = top[mid - 3:mid + 3][1:] - top[mid - 3:mid + 3][:-1]
    i = mid - 3 + int(np.argmax(gaps))
    eps = float((top[i] + top[i + 1]) / 2)
    return x, xp, eps, float(gaps.max())


def test_adaptation_loss_gradient_matches_finite_differences():
    model = model_with_target()
    x, xp, eps, gap = mixed_batch(model)
    assert gap > 1e-4
    config = AdaptConfig(epsilon_conf=eps, alpha=0.6)
    memory = torch.full((3, 3), 1 / 9, dtype=torch.float64)

    def loss():
        z, zp = paired_forward(model, x, xp, 7)
        return adaptation_loss(z, zp, [SmoothedJointState(0.6, memory.clone()) for _ in range(2)], config)[0]

    with torch.no_grad():
        z, _ = paired_forward(model, x, xp, 7)
    frac = float((z.max(-1).values >= eps).double().mean())
    assert 0.2 < frac < 0.8  # the batch mixes confident and unconfident rows
    params = [p for name, p in model.named_parameters() if not name.startswith("heads.over.")]
    analytic = torch.autograd.grad(loss(), params)
    with torch.no_grad():
        numeric = central_difference(loss, params)
    assert max_relative_error(analytic, numeric) < 1e-4


def test_sharpened_rows_receive_exactly_zero_gradient():
    rng = np.random.default_rng(3)
    logits = torch.tensor(rng.normal(size=(2, 10, 3)) * 3, dtype=torch.float64, requires_grad=True)
    logits_p = torch.tensor(rng.normal(size=(2, 10, 3)), dtype=torch.float64, requires_grad=True)
    z, zp = logits.softmax(-1), logits_p.softmax(-1)
    config = AdaptConfig(epsilon_conf=0.8)
    loss, _, frac = adaptation_loss(z, zp, [SmoothedJointState(1.0) for _ in range(2)], config)
    loss.backward()
    confident = z.detach().max(-1).values >= 0.8
    assert 0 < frac < 1
    assert torch.all(logits.grad[confident] == 0)
    assert torch.any(logits.grad[~confident] != 0)


def target_data(n=60):
    spec = GeneratorSpec("t", "vector", 3, [DomainSpec(0, VectorStyle(), n), DomainSpec(7, VectorStyle(
        rotation=30, translation=[2, 0, 0, 0]), n, "target")], dim=4)
    return generate(spec)


def test_source_free_contract():
    ds = target_data()
    model = model_with_target(dtype=torch.float32)
    with pytest.raises(ContractViolation):
        adapt(model, ds, AdaptConfig())  # two domains given
    with pytest.raises(ContractViolation):
        adapt(model, ds.select([0]), AdaptConfig())  # a source domain
    with pytest.raises(InvalidConfig):
        adapt(model, ds.select([7]), AdaptConfig(epsilon_conf=0.3))


def test_prepare_target_only_touches_target_statistics():
    ds = target_data()
    model = model_with_target(dtype=torch.float32)
    digest = parameter_digest(model)
    before = [t.clone() for pair in model.bn_statistics(0) for t in pair]
    prepare_target(model, ds.select([7]), AdaptConfig(bn_estimation_batches=5))
    assert parameter_digest(model) == digest
    assert all(torch.equal(a, b) for a, b in zip(before, [t for pair in model.bn_statistics(0) for t in pair]))
    assert model.bn_statistics(7)[0][0].abs().max() > 0


@pytest.mark.parametrize("method", ["acids", "entropy_baseline", "none"])
def test_adapt_methods_run_and_are_deterministic(method):
    ds = target_data().select([7])
    digests = []
    for _ in range(2):
        model = model_with_target(dtype=torch.float32)
        records = adapt(model, ds, AdaptConfig(method=method, epochs=2, batch_size=16, bn_estimation_batches=3,
                                               lr=1e-3))
        digests.append(parameter_digest(model))
    assert digests[0] == digests[1]
    assert len(records) == (0 if method == "none" else 2 * 3)
    assert method == "none" or "confident_fraction" in records[0]


def test_adaptation_leaves_over_head_and_sources_untouched():
    ds = target_data().select([7])
    model = model_with_target(dtype=torch.float32)
    over = {n: p.detach().clone() for n, p in model.named_parameters() if n.startswith("heads.over.")}
    src = [t.clone() for pair in model.bn_statistics(1) for t in pair]
    adapt(model, ds, AdaptConfig(epochs=1, batch_size=16, bn_estimation_batches=2, lr=1e-3))
    for n, p in model.named_parameters():
        if n in over:
            assert torch.equal(p, over[n])
    assert all(torch.equal(a, b) for a, b in zip(src, [t for pair in model.bn_statistics(1) for t in pair]))
