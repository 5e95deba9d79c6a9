"""Shared builders and independent oracles for the test suite."""
import numpy as np

from floral.mixed_model import (
    MixedModel,
    dense_adaptor_set,
    fml_loss,
    init_base,
    lora_adaptor_set,
)


def random_model(rng, family="linear", C=2, bias=True, kind="lora", d_x=3, d_h=4, d_y=2, rank=2):
    """Model with every adaptor factor randomized (so no gradient vanishes by construction)."""
    dims = (d_x, d_y) if family == "linear" else (d_x, d_h, d_y)
    base = init_base(family, dims, rng, bias=bias)
    for layer in base:
        if layer.bias is not None:
            layer.bias = rng.normal(size=layer.bias.shape)
    if kind == "lora":
        sets = [lora_adaptor_set(base, [rank] * len(base), rng, bias=bias) for _ in range(C)]
    else:
        sets = [dense_adaptor_set(base, rng) for _ in range(C)]
    model = MixedModel(family, base, sets)
    for s in model.adaptors:
        s.set_arrays([rng.normal(size=a.shape) for a in s.arrays()])
    return model


def scalar_forward(model, pi, x):
    """Loop-based evaluation of one sample, independent of the vectorized path."""
    h = list(x)
    for li, layer in enumerate(model.base):
        d_out, d_in = layer.weight.shape
        out = []
        for i in range(d_out):
            s = 0.0
            for j in range(d_in):
                w = layer.weight[i, j]
                for c, aset in enumerate(model.adaptors):
                    la = aset.layers[li]
                    if la is None:
                        continue
                    if la.lora is not None:
                        w += pi[c] * sum(la.lora.U[i, r] * la.lora.V[j, r]
                                         for r in range(la.lora.rank))
                    if la.dense is not None:
                        w += pi[c] * la.dense[i, j]
                s += w * h[j]
            if layer.bias is not None:
                s += layer.bias[i]
                for c, aset in enumerate(model.adaptors):
                    la = aset.layers[li]
                    if la is not None and la.bias is not None:
                        s += pi[c] * la.bias.delta[i]
            out.append(s)
        if li < len(model.base) - 1:
            out = [max(v, 0.0) for v in out]
        h = out
    return np.array(h)


def softmax_ref(theta):
    e = np.exp(theta - np.max(theta))
    return e / e.sum()


def fd_check(model, theta, X, Y, grads, h=1e-5):
    """Max relative error of ``grads`` against central differences of the FML loss."""
    def loss_at(th):
        return fml_loss(model, softmax_ref(th), X, Y)

    worst = 0.0

    def compare(analytic, numeric):
        nonlocal worst
        scale = max(abs(numeric), abs(analytic), 1e-6)
        worst = max(worst, abs(analytic - numeric) / scale)

    for arrays, g_arrays in ([model.base_arrays(), grads.base],
                             *[[s.arrays(), g] for s, g in zip(model.adaptors, grads.adaptors)]):
        for arr, g in zip(arrays, g_arrays):
            for idx in np.ndindex(arr.shape):
                old = arr[idx]
                arr[idx] = old + h
                up = loss_at(theta)
                arr[idx] = old - h
                down = loss_at(theta)
                arr[idx] = old
                compare(g[idx], (up - down) / (2 * h))
    for c in range(len(theta)):
        e = np.zeros_like(theta)
        e[c] = h
        compare(grads.router[c], (loss_at(theta + e) - loss_at(theta - e)) / (2 * h))
    return worst


def pooled_lstsq_floor(task):
    """Smallest mean per-client test MSE any single shared linear map can reach.

    Fitted by least squares on the pooled test data, so it lower-bounds every
    shared-model method on this task.
    """
    X = np.concatenate([s.X_test for s in task.splits])
    Y = np.concatenate([s.Y_test for s in task.splits])
    W, *_ = np.linalg.lstsq(X, Y, rcond=None)
    return float(np.mean([np.mean((s.X_test @ W - s.Y_test) ** 2) for s in task.splits]))


def report_key(report):
    """Everything in a round report except wall time."""
    routers = None if report.routers is None else report.routers.tobytes()
    return (report.round, tuple(report.clients), tuple(sorted(report.train_losses.items())),
            report.test_loss, tuple(report.client_test_losses), routers,
            report.router_accuracy, None if report.tv_per_cluster is None
            else tuple(report.tv_per_cluster))
