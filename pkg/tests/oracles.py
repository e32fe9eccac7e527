"""Independent reference implementations used as test oracles.

Everything here is written against the math directly (window walks, explicit
loops, closed forms) and deliberately shares no kernel code with the package.
"""

from __future__ import annotations

import numpy as np


def conv2d(x, w, stride=1, pad=0):
    """Window-walk convolution: loops over every output position."""
    n, ci, h, width = x.shape
    co, ci2, kh, kw = w.shape
    assert ci == ci2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (width + 2 * pad - kw) // stride + 1
    y = np.zeros((n, co, oh, ow), dtype=x.dtype)
    for b in range(n):
        for o in range(co):
            for i in range(oh):
                for j in range(ow):
                    patch = xp[b, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    y[b, o, i, j] = np.sum(patch * w[o])
    return y


def conv2d_scalar(x, w, stride=1, pad=0):
    """Fully scalar six-deep loop; validates the window-walk oracle itself."""
    n, ci, h, width = x.shape
    co, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (width + 2 * pad - kw) // stride + 1
    y = np.zeros((n, co, oh, ow), dtype=x.dtype)
    for b in range(n):
        for o in range(co):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for c in range(ci):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[b, c, i * stride + u, j * stride + v] * w[o, c, u, v]
                    y[b, o, i, j] = acc
    return y


def batchnorm_infer(x, gamma, beta, mean, var, eps=1e-5):
    y = np.empty_like(x)
    for c in range(x.shape[1]):
        y[:, c] = (x[:, c] - mean[c]) / np.sqrt(var[c] + eps) * gamma[c] + beta[c]
    return y


def batchnorm_train(x, gamma, beta, eps=1e-5):
    y = np.empty_like(x)
    for c in range(x.shape[1]):
        mu = x[:, c].mean()
        var = x[:, c].var()
        y[:, c] = (x[:, c] - mu) / np.sqrt(var + eps) * gamma[c] + beta[c]
    return y


def maxpool(x, kernel=3, stride=2, pad=1):
    n, c, h, w = x.shape
    xp = np.full((n, c, h + 2 * pad, w + 2 * pad), -np.inf, dtype=x.dtype)
    xp[:, :, pad : pad + h, pad : pad + w] = x
    oh = (h + 2 * pad - kernel) // stride + 1
    ow = (w + 2 * pad - kernel) // stride + 1
    y = np.zeros((n, c, oh, ow), dtype=x.dtype)
    for b in range(n):
        for ch in range(c):
            for i in range(oh):
                for j in range(ow):
                    y[b, ch, i, j] = xp[
                        b, ch, i * stride : i * stride + kernel, j * stride : j * stride + kernel
                    ].max()
    return y


def global_avg_pool(x):
    n, c = x.shape[:2]
    y = np.zeros((n, c), dtype=x.dtype)
    for b in range(n):
        for ch in range(c):
            y[b, ch] = x[b, ch].mean()
    return y


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def forward_bottleneck_net(spec, params, image):
    """Whole-network reference forward (inference mode), composed from the
    naive kernels above plus the tensor naming convention."""
    from rrrkit.archspec import enumerate_blocks

    x = image[None].astype(np.float32)
    x = (x - params["normalize.mean"][None, :, None, None]) / params["normalize.std"][None, :, None, None]

    def bn(h, prefix):
        return batchnorm_infer(
            h,
            params[f"{prefix}.weight"],
            params[f"{prefix}.bias"],
            params[f"{prefix}.running_mean"],
            params[f"{prefix}.running_var"],
        )

    def run_block(desc, h):
        name = desc.name
        if desc.phase_index == 1:
            h = conv2d(h, params["conv1.conv.weight"], 2, 3)
            h = np.maximum(bn(h, "conv1.bn"), 0)
            return maxpool(h)
        out = conv2d(h, params[f"{name}.conv1.weight"], 1, 0)
        out = np.maximum(bn(out, f"{name}.bn1"), 0)
        out = conv2d(out, params[f"{name}.conv2.weight"], desc.stride, 1)
        out = np.maximum(bn(out, f"{name}.bn2"), 0)
        out = conv2d(out, params[f"{name}.conv3.weight"], 1, 0)
        out = bn(out, f"{name}.bn3")
        if desc.has_projection:
            skip = conv2d(h, params[f"{name}.downsample.conv.weight"], desc.stride, 0)
            skip = bn(skip, f"{name}.downsample.bn")
        else:
            skip = h
        return np.maximum(out + skip, 0)

    stump = [d for d in enumerate_blocks(spec) if d.branch_index is None]
    branch_descs = {}
    for d in enumerate_blocks(spec):
        if d.branch_index is not None:
            branch_descs.setdefault(d.branch_index, []).append(d)
    for desc in stump:
        x = run_block(desc, x)
    if not branch_descs:
        feats = global_avg_pool(x)
        logits = feats @ params["head.weight"].T + params["head.bias"]
        return softmax(logits)[0][None]
    probs = []
    for j in sorted(branch_descs):
        h = x
        for desc in branch_descs[j]:
            h = run_block(desc, h)
        feats = global_avg_pool(h)
        logits = feats @ params[f"head.branch{j}.weight"].T + params[f"head.branch{j}.bias"]
        probs.append(softmax(logits)[0])
    return np.stack(probs)


def finite_difference(fn, arr, eps):
    """Central-difference gradient of scalar fn with respect to arr."""
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = fn()
        flat[i] = orig - eps
        lo = fn()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


def rel_err(a, b):
    denom = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8)
    return np.max(np.abs(a - b)) / denom


def logistic_regression_separable(features, labels, classes, steps=600, lr=0.5):
    """Plain softmax regression by gradient descent; returns train accuracy.

    Serves as the separability oracle for head-only training claims.
    """
    x = np.asarray(features, dtype=np.float64)
    x = (x - x.mean(0)) / (x.std(0) + 1e-8)
    n = x.shape[0]
    w = np.zeros((classes, x.shape[1]))
    b = np.zeros(classes)
    onehot = np.eye(classes)[labels]
    for _ in range(steps):
        p = softmax(x @ w.T + b)
        g = (p - onehot) / n
        w -= lr * (g.T @ x)
        b -= lr * g.sum(0)
    return float((np.argmax(x @ w.T + b, axis=1) == labels).mean())
