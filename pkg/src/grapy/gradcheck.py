"""Central finite-difference gradient suites (64-bit only).

Tape gradients are compared against central differences of the tape-free
forward path, which computes bitwise-identically. Error metric per element:
|a - b| / max(1, |a|, |b|), reported as the suite maximum.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .hierarchy import coarsen, taxonomy_by_name
from .model import ModelParams, forward, loss_tensor
from .pyramid import GpmLevelParams, pyramid_forward, reason
from .tensor import Tape, Tensor, cross_entropy_mean, precision

FD_STEP = 1e-5
TOLERANCE = 1e-4


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))))


def central_diff(func, arr: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """d func / d arr by central differences, one coordinate at a time."""
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = func()
        flat[i] = orig - h
        fm = func()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def check_tensor_grads(build, leaves: list[Tensor], h: float = FD_STEP) -> float:
    """Max rel. error between tape gradients and finite differences of ``build``.

    ``build`` must construct the scalar loss from the given leaf tensors and is
    re-run (tape-free) for every perturbation.
    """
    with Tape() as tape:
        loss = build()
    grad_map = tape.backward(loss)
    worst = 0.0
    for leaf in leaves:
        fd = central_diff(lambda: float(build().data), leaf.data, h)
        got = grad_map.get(leaf)
        if got is None:
            got = np.zeros_like(leaf.data)
        worst = max(worst, rel_err(got, fd))
    return worst


def _weighted(t: Tensor, w: np.ndarray) -> Tensor:
    return T.tsum(T.mul(t, Tensor(w)))


def op_suites(seed: int = 0) -> dict[str, float]:
    """Finite-difference checks for every differentiable op."""
    rng = np.random.default_rng(seed)

    def leaf(*shape):
        return Tensor(rng.normal(0.0, 1.0, shape), requires_grad=True)

    results: dict[str, float] = {}

    a, b = leaf(3, 4), leaf(3, 4)
    w = rng.normal(size=(3, 4))
    results["add"] = check_tensor_grads(lambda: _weighted(T.add(a, b), w), [a, b])
    results["sub"] = check_tensor_grads(lambda: _weighted(T.sub(a, b), w), [a, b])
    results["mul"] = check_tensor_grads(lambda: _weighted(T.mul(a, b), w), [a, b])
    bp = Tensor(rng.uniform(0.5, 1.5, (3, 4)), requires_grad=True)
    results["div"] = check_tensor_grads(lambda: _weighted(T.div(a, bp), w), [a, bp])

    ab, bb = leaf(3, 1), leaf(1, 4)
    results["broadcast"] = check_tensor_grads(lambda: _weighted(T.mul(ab, bb), w), [ab, bb])

    m, n = leaf(4, 5), leaf(5, 3)
    wmn = rng.normal(size=(4, 3))
    results["matmul"] = check_tensor_grads(lambda: _weighted(T.matmul(m, n), wmn), [m, n])

    s = leaf(5, 5)
    ws = rng.normal(size=(5, 5))
    results["softmax_rows"] = check_tensor_grads(lambda: _weighted(T.softmax_rows(s), ws), [s])

    r = Tensor(rng.normal(0.0, 1.0, (4, 6)) + 0.2, requires_grad=True)  # keep off the kink
    wr = rng.normal(size=(4, 6))
    results["relu"] = check_tensor_grads(lambda: _weighted(T.relu(r), wr), [r])

    x, k = leaf(6, 6, 2), leaf(3, 3, 2, 3)
    wc = rng.normal(size=(6, 6, 3))
    results["conv2d"] = check_tensor_grads(lambda: _weighted(T.conv2d(x, k), wc), [x, k])
    wc2 = rng.normal(size=(3, 3, 3))
    results["conv2d_stride2"] = check_tensor_grads(
        lambda: _weighted(T.conv2d(x, k, stride=2), wc2), [x, k])

    c1, c2 = leaf(3, 2), leaf(3, 3)
    wcc = rng.normal(size=(3, 5))
    results["concat"] = check_tensor_grads(
        lambda: _weighted(T.concat([c1, c2], axis=1), wcc), [c1, c2])

    u = leaf(3, 4)
    results["sum"] = check_tensor_grads(lambda: T.tsum(u), [u])
    wsum = rng.normal(size=(4,))
    results["sum_axis"] = check_tensor_grads(lambda: _weighted(T.tsum(u, axes=0), wsum), [u])
    results["mean"] = check_tensor_grads(lambda: T.tmean(u), [u])
    results["scale"] = check_tensor_grads(lambda: T.scale(T.tsum(u), 2.5), [u])
    wre = rng.normal(size=(12,))
    results["reshape"] = check_tensor_grads(lambda: _weighted(T.reshape(u, (12,)), wre), [u])
    wtr = rng.normal(size=(4, 3))
    results["transpose"] = check_tensor_grads(lambda: _weighted(T.transpose(u), wtr), [u])

    f = leaf(5, 6, 3)
    labels = rng.integers(0, 3, size=(5, 6))
    labels.reshape(-1)[:3] = [0, 1, 2]  # every category occupied
    wp = rng.normal(size=(3, 6))
    results["masked_pool"] = check_tensor_grads(
        lambda: _weighted(T.masked_pool(f, labels, 3)[0], wp), [f])
    wp_ave = rng.normal(size=(3, 3))
    results["masked_pool_ave"] = check_tensor_grads(
        lambda: _weighted(T.masked_pool(f, labels, 3, mode="ave")[0], wp_ave), [f])
    results["masked_pool_max"] = check_tensor_grads(
        lambda: _weighted(T.masked_pool(f, labels, 3, mode="max")[0], wp_ave), [f])

    nodes = leaf(3, 4)
    wb = rng.normal(size=(5, 6, 4))
    results["broadcast_nodes"] = check_tensor_grads(
        lambda: _weighted(T.broadcast_nodes(nodes, labels), wb), [nodes])

    logits = leaf(4, 4, 3)
    q = rng.integers(0, 3, size=(4, 4))
    results["cross_entropy"] = check_tensor_grads(
        lambda: cross_entropy_mean(T.softmax_channels(logits), q), [logits])

    return results


def reason_suite(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    v = Tensor(rng.normal(0.0, 1.0, (4, 8)), requires_grad=True)
    params = GpmLevelParams.init(rng, 8, 4)
    w = rng.normal(size=(4, 8))
    return check_tensor_grads(lambda: _weighted(reason(v, params), w),
                              [v, params.q1, params.q2])


def pyramid_suite(seed: int = 0) -> float:
    """Pyramid-branch loss gradient wrt the feature map and all pyramid weights.

    Category maps are frozen from a fixed prediction so the checked function
    is exactly the one the tape differentiates (argmax stays off the tape).
    """
    rng = np.random.default_rng(seed)
    tax = taxonomy_by_name("A")
    f = Tensor(rng.normal(0.0, 1.0, (8, 8, 4)), requires_grad=True)
    from .pyramid import GpmParams

    gpm = GpmParams.init(rng, 4, tax.k3)
    y = Tensor(rng.uniform(0.0, 1.0, (8, 8, tax.k3)))
    q = rng.integers(0, tax.k3, size=(8, 8))
    maps = {level: coarsen(np.argmax(y.data, axis=2), tax, level) for level in (1, 2, 3)}

    def build():
        _, y_hat = pyramid_forward(f, y, tax, gpm, label_maps=maps)
        return cross_entropy_mean(y_hat, q)

    leaves = [f] + list(gpm.named().values())
    return check_tensor_grads(build, leaves)


def end_to_end_suite(seed: int = 0) -> float:
    """Two-branch loss gradient wrt every model parameter on an 8x8x4 instance.

    Runs in ground-truth-mask mode so the category maps are constants for
    both the tape and the finite differences.
    """
    rng = np.random.default_rng(seed)
    tax = taxonomy_by_name("A")
    params = ModelParams.init(rng, tax, c_in=4, width=8, channels=4)
    image = rng.uniform(0.0, 1.0, (8, 8, 4))
    q = rng.integers(0, tax.k3, size=(8, 8))

    def build():
        out = forward(image, params, tax, gt_labels=q)
        return loss_tensor(out, q, params.loss_weight)

    return check_tensor_grads(build, list(params.named().values()))


def run_all(seed: int = 0, verbose: bool = False) -> tuple[dict[str, float], bool]:
    """All suites in 64-bit; returns (per-suite max rel. error, all under tolerance)."""
    with precision("f64"):
        results = op_suites(seed)
        results["reason"] = reason_suite(seed)
        results["pyramid"] = pyramid_suite(seed)
        results["end_to_end"] = end_to_end_suite(seed)
    ok = all(v < TOLERANCE for v in results.values())
    if verbose:
        for name, value in results.items():
            mark = "ok " if value < TOLERANCE else "FAIL"
            print(f"{mark} {name:<18} max_rel_err={value:.3e}")
    return results, ok
