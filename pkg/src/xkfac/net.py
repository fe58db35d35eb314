"""Minimal feedforward networks with exact per-example backpropagation.

Layers: fully connected, 2-D convolution (via im2col), batch normalization
(BN), batch renormalization (BRN), ReLU, and softmax cross-entropy loss.

The unusual part is ``per_example_backward``: for every example n it runs a
full backward sweep seeded with the gradient of that example's loss alone,
recording the complete gradient matrix at each learnable unit's output.
Normalization layers couple examples through their mini-batch statistics, so
these matrices have non-zero columns m != n whenever a norm layer sits
downstream of the capture point.

Activation layout: MLP activations are (channels, N) arrays.  Convolutional
activations are (channels, S*N) arrays where column s*N + n holds spatial
location s of example n; spatial metadata travels in the forward cache.
"""

from __future__ import annotations

import copy
import io
import json
from dataclasses import dataclass, field

import numpy as np

BN = "bn"
BRN = "brn"


# ---------------------------------------------------------------------------
# layers


class LinearLayer:
    kind = "linear"

    def __init__(self, w: np.ndarray, b: np.ndarray):
        self.w = np.asarray(w, dtype=np.float64)
        self.b = np.asarray(b, dtype=np.float64)
        if self.w.ndim != 2 or self.b.shape != (self.w.shape[0],):
            raise ValueError("inconsistent linear layer shapes")

    @classmethod
    def init(cls, c_in: int, c_out: int, rng: np.random.Generator):
        w = rng.standard_normal((c_out, c_in)) * np.sqrt(2.0 / c_in)
        return cls(w, np.zeros(c_out))

    def params(self):
        return {"w": self.w, "b": self.b}


class ConvLayer:
    """2-D convolution expressed as im2col followed by a matrix product."""

    kind = "conv"

    def __init__(self, w, b, in_channels, kernel, stride=1, padding=0):
        self.w = np.asarray(w, dtype=np.float64)
        self.b = np.asarray(b, dtype=np.float64)
        self.in_channels = int(in_channels)
        self.kernel = (int(kernel[0]), int(kernel[1]))
        self.stride = int(stride)
        self.padding = int(padding)
        k = self.kernel[0] * self.kernel[1]
        if self.w.shape[1] != self.in_channels * k:
            raise ValueError("conv weight width must be C_in * K")

    @classmethod
    def init(cls, c_in, c_out, kernel, rng, stride=1, padding=0):
        k = kernel[0] * kernel[1]
        w = rng.standard_normal((c_out, c_in * k)) * np.sqrt(2.0 / (c_in * k))
        return cls(w, np.zeros(c_out), c_in, kernel, stride, padding)

    def out_spatial(self, h, w):
        kh, kw = self.kernel
        ho = (h + 2 * self.padding - kh) // self.stride + 1
        wo = (w + 2 * self.padding - kw) // self.stride + 1
        if ho <= 0 or wo <= 0:
            raise ValueError("conv output has non-positive spatial size")
        return ho, wo

    def params(self):
        return {"w": self.w, "b": self.b}


class NormLayer:
    """BN / BRN over channels; statistics are taken over all columns."""

    kind = "norm"

    def __init__(self, channels, mode=BN, eps=1e-5, momentum=0.1,
                 r_max=1.0, d_max=0.0):
        if eps <= 0:
            raise ValueError("eps must be positive")
        self.mode = mode
        self.eps = float(eps)
        self.momentum = float(momentum)
        self.r_max = float(r_max)
        self.d_max = float(d_max)
        self.gamma = np.ones(channels)
        self.beta = np.zeros(channels)
        self.pop_mean = np.zeros(channels)
        self.pop_var = np.ones(channels)

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}


class ReLULayer:
    kind = "relu"

    def params(self):
        return {}


class FlattenLayer:
    """(C, S*N) conv layout -> (C*S, N) dense layout, s-major features."""

    kind = "flatten"

    def params(self):
        return {}


# ---------------------------------------------------------------------------
# im2col / col2im


def im2col(x, height, width, n, kernel, stride=1, padding=0):
    """Unroll (C, H*W*N) conv activations into receptive-field columns.

    Returns a (C*kh*kw, S_out*N) matrix whose column s*N + n holds the
    receptive field of output location s of example n.
    """
    c = x.shape[0]
    if x.shape[1] != height * width * n:
        raise ValueError("activation width does not match spatial metadata")
    kh, kw = kernel
    ho = (height + 2 * padding - kh) // stride + 1
    wo = (width + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ValueError("im2col output has non-positive spatial size")
    x4 = x.reshape(c, height, width, n)
    xp = np.pad(x4, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    out = np.empty((c, kh, kw, ho, wo, n))
    for ki in range(kh):
        for kj in range(kw):
            out[:, ki, kj] = xp[:, ki:ki + stride * ho:stride,
                                kj:kj + stride * wo:stride]
    return out.reshape(c * kh * kw, ho * wo * n)


def col2im(cols, height, width, n, kernel, stride=1, padding=0):
    """Adjoint of im2col: scatter-add column gradients back to the input."""
    kh, kw = kernel
    ho = (height + 2 * padding - kh) // stride + 1
    wo = (width + 2 * padding - kw) // stride + 1
    c = cols.shape[0] // (kh * kw)
    g6 = cols.reshape(c, kh, kw, ho, wo, n)
    xp = np.zeros((c, height + 2 * padding, width + 2 * padding, n))
    for ki in range(kh):
        for kj in range(kw):
            xp[:, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += g6[:, ki, kj]
    if padding:
        xp = xp[:, padding:-padding, padding:-padding]
    return xp.reshape(c, height * width * n)


# ---------------------------------------------------------------------------
# network


@dataclass
class Unit:
    """One learnable unit: a linear/conv block plus its trailing norm layer."""

    linear_idx: int
    norm_idx: int | None


@dataclass
class BatchActivations:
    """Forward cache for one mini-batch."""

    n: int
    train_mode: bool
    block_cache: list = field(default_factory=list)
    logits: np.ndarray | None = None


class Network:
    def __init__(self, blocks, input_spatial=None):
        self.blocks = list(blocks)
        self.input_spatial = input_spatial  # (H, W) when the net starts with conv
        self.units = self._scan_units()

    def _scan_units(self):
        units = []
        for i, blk in enumerate(self.blocks):
            if blk.kind in ("linear", "conv"):
                norm_idx = None
                if i + 1 < len(self.blocks) and self.blocks[i + 1].kind == "norm":
                    norm_idx = i + 1
                units.append(Unit(i, norm_idx))
        return units

    @classmethod
    def mlp(cls, widths, rng, norm_mode=BN, norm_hidden=True, eps=1e-5,
            momentum=0.1):
        """MLP with a norm layer before every hidden ReLU."""
        blocks = []
        for i in range(len(widths) - 1):
            blocks.append(LinearLayer.init(widths[i], widths[i + 1], rng))
            last = i == len(widths) - 2
            if not last:
                if norm_hidden and norm_mode is not None:
                    blocks.append(NormLayer(widths[i + 1], mode=norm_mode,
                                            eps=eps, momentum=momentum))
                blocks.append(ReLULayer())
        return cls(blocks)

    # -- parameter plumbing

    def param_items(self):
        out = []
        for i, blk in enumerate(self.blocks):
            for name, arr in blk.params().items():
                out.append((f"{i}.{name}", arr))
        return out

    def get_param_vector(self):
        return np.concatenate([a.ravel() for _, a in self.param_items()])

    def set_param_vector(self, vec):
        pos = 0
        for _, arr in self.param_items():
            arr.flat[:] = vec[pos:pos + arr.size]
            pos += arr.size
        if pos != vec.size:
            raise ValueError("parameter vector size mismatch")

    def clone(self):
        return copy.deepcopy(self)

    def set_brn_limits(self, r_max, d_max):
        for blk in self.blocks:
            if blk.kind == "norm":
                blk.r_max = float(r_max)
                blk.d_max = float(d_max)

    # -- forward

    def forward(self, x, train_mode, update_stats=None, injections=None):
        """Run the network; returns (BatchActivations, logits).

        ``injections`` optionally maps unit index -> perturbation added to
        that unit's raw linear output (used by oracle finite differences).
        """
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] == 0:
            raise ValueError("input batch must be (features, N) with N >= 1")
        if update_stats is None:
            update_stats = train_mode
        injections = injections or {}
        unit_of_linear = {u.linear_idx: k for k, u in enumerate(self.units)}

        acts = BatchActivations(n=x.shape[1], train_mode=train_mode)
        cur = x
        spatial = None
        if self.input_spatial is not None:
            spatial = tuple(self.input_spatial)
            cur = _to_conv_layout(x, spatial, x.shape[1])
        n = x.shape[1]

        for i, blk in enumerate(self.blocks):
            cache = {}
            if blk.kind == "linear":
                cache["a_in"] = cur
                z = blk.w @ cur + blk.b[:, None]
                if i in unit_of_linear and unit_of_linear[i] in injections:
                    z = z + injections[unit_of_linear[i]]
                cache["z"] = z
                cur = z
            elif blk.kind == "conv":
                h, w = spatial
                cols = im2col(cur, h, w, n, blk.kernel, blk.stride, blk.padding)
                cache["a_in"] = cols
                cache["in_spatial"] = (h, w)
                z = blk.w @ cols + blk.b[:, None]
                if i in unit_of_linear and unit_of_linear[i] in injections:
                    z = z + injections[unit_of_linear[i]]
                cache["z"] = z
                spatial = blk.out_spatial(h, w)
                cache["out_spatial"] = spatial
                cur = z
            elif blk.kind == "norm":
                cur, ncache = _norm_forward(blk, cur, train_mode, update_stats)
                cache.update(ncache)
            elif blk.kind == "relu":
                cache["mask"] = cur > 0
                cur = np.maximum(cur, 0.0)
            elif blk.kind == "flatten":
                s = spatial[0] * spatial[1]
                cache["conv_shape"] = (cur.shape[0], s, n)
                cur = cur.reshape(cur.shape[0], s, n).reshape(cur.shape[0] * s, n)
                spatial = None
            else:  # pragma: no cover
                raise ValueError(f"unknown layer kind {blk.kind}")
            if not np.all(np.isfinite(cur)):
                raise FloatingPointError(f"non-finite activations at block {i}")
            cache["spatial"] = spatial
            acts.block_cache.append(cache)

        acts.logits = cur
        return acts, cur

    # -- backward

    def backward(self, acts, targets):
        """Gradients of the mean loss E_n[L_n] for all raw parameters."""
        if not acts.block_cache:
            raise ValueError("missing forward cache")
        probs = softmax(acts.logits)
        seed = (probs - one_hot(targets, acts.logits.shape[0])) / acts.n
        grads, _, _ = self._sweep(acts, seed)
        return grads

    def backward_from_logit_grad(self, acts, g_logits, activation_injections=None):
        """Backward sweep from an arbitrary logit gradient.

        ``activation_injections`` maps unit index -> gradient w.r.t. that
        unit's (unrolled, homogeneous-free) input activations, added during
        the sweep; this is how the penalty's statistic paths reach earlier
        layers.
        """
        grads, _, _ = self._sweep(acts, g_logits,
                                  activation_injections=activation_injections)
        return grads

    def per_example_backward(self, acts, losses_grad=None, targets=None,
                             capture="merged", collect_param_grads=False,
                             collect_stat_grads=False):
        """Exact per-example gradient tensors D_l[n][a][m] = dL_n/d(h_l)_{a,m}.

        ``capture="merged"`` records gradients at each unit's output (after
        its norm layer, if any); ``capture="linear"`` records them at the raw
        linear output.  One full backward sweep is run per example.
        """
        if not acts.train_mode:
            raise ValueError("per-example backward requires a train-mode cache")
        n = acts.n
        if losses_grad is None:
            probs = softmax(acts.logits)
            losses_grad = probs - one_hot(targets, acts.logits.shape[0])
        d = [np.zeros((n,) + self._capture_shape(acts, k), )
             for k in range(len(self.units))]
        pgrads = [] if collect_param_grads else None
        sgrads = [] if collect_stat_grads else None
        for ex in range(n):
            seed = np.zeros_like(losses_grad)
            seed[:, ex] = losses_grad[:, ex]
            grads, captured, stats = self._sweep(
                acts, seed, capture=capture,
                collect_params=collect_param_grads,
                collect_stats=collect_stat_grads)
            for k in range(len(self.units)):
                d[k][ex] = captured[k]
            if collect_param_grads:
                pgrads.append(grads)
            if collect_stat_grads:
                sgrads.append(stats)
        out = {"d": d}
        if collect_param_grads:
            out["param_grads"] = pgrads
        if collect_stat_grads:
            out["stat_grads"] = sgrads
        return out

    def _capture_shape(self, acts, unit_idx):
        u = self.units[unit_idx]
        return acts.block_cache[u.linear_idx]["z"].shape

    def _sweep(self, acts, g_logits, capture="merged",
               activation_injections=None, collect_params=False,
               collect_stats=False):
        """Reverse walk shared by all backward entry points."""
        if not acts.train_mode:
            raise ValueError("backward requires a train-mode forward cache")
        activation_injections = activation_injections or {}
        unit_of_linear = {u.linear_idx: k for k, u in enumerate(self.units)}
        norm_units = {u.norm_idx: k for k, u in enumerate(self.units)
                      if u.norm_idx is not None}
        captured = [None] * len(self.units)
        grads = {}
        stats = {}
        g = g_logits
        for i in range(len(self.blocks) - 1, -1, -1):
            blk = self.blocks[i]
            cache = acts.block_cache[i]
            if blk.kind == "relu":
                g = g * cache["mask"]
            elif blk.kind == "flatten":
                c, s, n = cache["conv_shape"]
                g = g.reshape(c, s, n).reshape(c, s * n)
            elif blk.kind == "norm":
                if capture == "merged" and i in norm_units:
                    captured[norm_units[i]] = g
                g, ng, sg = _norm_backward(blk, cache, g)
                grads[f"{i}.gamma"] = ng["gamma"]
                grads[f"{i}.beta"] = ng["beta"]
                if collect_stats:
                    stats[i] = sg
            elif blk.kind in ("linear", "conv"):
                k = unit_of_linear[i]
                if captured[k] is None:
                    captured[k] = g  # merged == linear when no norm follows
                if capture == "linear":
                    captured[k] = g
                grads[f"{i}.w"] = g @ cache["a_in"].T
                grads[f"{i}.b"] = g.sum(axis=1)
                g = blk.w.T @ g
                if k in activation_injections:
                    g = g + activation_injections[k]
                if blk.kind == "conv":
                    h, w = cache["in_spatial"]
                    g = col2im(g, h, w, acts.n, blk.kernel, blk.stride,
                               blk.padding)
            else:  # pragma: no cover
                raise ValueError(f"unknown layer kind {blk.kind}")
        return grads, captured, stats

    # -- checkpoint io

    def save(self, path):
        arrays, specs = {}, []
        for i, blk in enumerate(self.blocks):
            spec = {"kind": blk.kind}
            if blk.kind == "linear":
                arrays[f"{i}.w"], arrays[f"{i}.b"] = blk.w, blk.b
            elif blk.kind == "conv":
                arrays[f"{i}.w"], arrays[f"{i}.b"] = blk.w, blk.b
                spec.update(in_channels=blk.in_channels, kernel=list(blk.kernel),
                            stride=blk.stride, padding=blk.padding)
            elif blk.kind == "norm":
                spec.update(mode=blk.mode, eps=blk.eps, momentum=blk.momentum,
                            r_max=blk.r_max, d_max=blk.d_max)
                arrays[f"{i}.gamma"], arrays[f"{i}.beta"] = blk.gamma, blk.beta
                arrays[f"{i}.pop_mean"] = blk.pop_mean
                arrays[f"{i}.pop_var"] = blk.pop_var
            specs.append(spec)
        header = {"format_version": 1, "blocks": specs,
                  "input_spatial": list(self.input_spatial) if self.input_spatial else None}
        np.savez(path, __header__=np.frombuffer(
            json.dumps(header).encode(), dtype=np.uint8), **arrays)

    @classmethod
    def load(cls, path):
        with np.load(path) as z:
            header = json.loads(bytes(z["__header__"]).decode())
            if header.get("format_version") != 1:
                raise ValueError("unsupported checkpoint format version")
            blocks = []
            for i, spec in enumerate(header["blocks"]):
                kind = spec["kind"]
                if kind == "linear":
                    blocks.append(LinearLayer(z[f"{i}.w"], z[f"{i}.b"]))
                elif kind == "conv":
                    blocks.append(ConvLayer(z[f"{i}.w"], z[f"{i}.b"],
                                            spec["in_channels"], spec["kernel"],
                                            spec["stride"], spec["padding"]))
                elif kind == "norm":
                    nl = NormLayer(z[f"{i}.gamma"].shape[0], mode=spec["mode"],
                                   eps=spec["eps"], momentum=spec["momentum"],
                                   r_max=spec["r_max"], d_max=spec["d_max"])
                    nl.gamma = z[f"{i}.gamma"].copy()
                    nl.beta = z[f"{i}.beta"].copy()
                    nl.pop_mean = z[f"{i}.pop_mean"].copy()
                    nl.pop_var = z[f"{i}.pop_var"].copy()
                    blocks.append(nl)
                elif kind == "relu":
                    blocks.append(ReLULayer())
                elif kind == "flatten":
                    blocks.append(FlattenLayer())
            sp = header.get("input_spatial")
            return cls(blocks, input_spatial=tuple(sp) if sp else None)


def _to_conv_layout(x, spatial, n):
    """(C*H*W, N) input -> (C, H*W*N) conv layout."""
    h, w = spatial
    c = x.shape[0] // (h * w)
    return x.reshape(c, h * w, n).reshape(c, h * w * n)


def _norm_forward(blk, z, train_mode, update_stats):
    cache = {"z_in": z}
    m = z.shape[1]
    if train_mode:
        mu_b = z.mean(axis=1)
        var_b = z.var(axis=1)  # biased, standard BN convention
        inv_std = 1.0 / np.sqrt(var_b + blk.eps)
        xhat = (z - mu_b[:, None]) * inv_std[:, None]
        if blk.mode == BN:
            out = blk.gamma[:, None] * xhat + blk.beta[:, None]
            r = np.ones_like(mu_b)
            d = np.zeros_like(mu_b)
        else:
            r = np.sqrt((var_b + blk.eps) / (blk.pop_var + blk.eps))
            r = np.clip(r, 1.0 / blk.r_max, blk.r_max)
            d = (mu_b - blk.pop_mean) / np.sqrt(blk.pop_var + blk.eps)
            d = np.clip(d, -blk.d_max, blk.d_max)
            out = blk.gamma[:, None] * (xhat * r[:, None] + d[:, None]) + blk.beta[:, None]
        if update_stats:
            blk.pop_mean += blk.momentum * (mu_b - blk.pop_mean)
            blk.pop_var += blk.momentum * (var_b - blk.pop_var)
        cache.update(mu_b=mu_b, var_b=var_b, inv_std=inv_std, xhat=xhat,
                     r=r, d=d, m=m)
    else:
        inv_std = 1.0 / np.sqrt(blk.pop_var + blk.eps)
        out = blk.gamma[:, None] * (z - blk.pop_mean[:, None]) * inv_std[:, None] \
            + blk.beta[:, None]
        cache.update(inv_std=inv_std)
    return out, cache


def _norm_backward(blk, cache, g):
    """Train-mode norm backward; BRN stops gradients through r and d."""
    xhat, inv_std, m = cache["xhat"], cache["inv_std"], cache["m"]
    if blk.mode == BN:
        affine_in = xhat
        dxhat = g * blk.gamma[:, None]
    else:
        affine_in = xhat * cache["r"][:, None] + cache["d"][:, None]
        dxhat = g * (blk.gamma * cache["r"])[:, None]
    ngrads = {"gamma": (g * affine_in).sum(axis=1), "beta": g.sum(axis=1)}
    mean_dx = dxhat.mean(axis=1)
    mean_dx_xhat = (dxhat * xhat).mean(axis=1)
    dz = inv_std[:, None] * (dxhat - mean_dx[:, None] - xhat * mean_dx_xhat[:, None])
    stat_grads = {
        "mu": -inv_std * dxhat.sum(axis=1),
        "var": -0.5 * inv_std ** 2 * (dxhat * xhat).sum(axis=1),
    }
    return dz, ngrads, stat_grads


# ---------------------------------------------------------------------------
# loss and sampling


def softmax(logits):
    z = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def one_hot(labels, classes):
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((classes, labels.shape[0]))
    out[labels, np.arange(labels.shape[0])] = 1.0
    return out


def cross_entropy(logits, labels):
    """Per-example cross-entropy losses, shape (N,)."""
    z = logits - logits.max(axis=0, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=0))
    return lse - z[np.asarray(labels, dtype=np.int64), np.arange(logits.shape[1])]


def cross_entropy_grad(logits, labels):
    """Gradient of each example's own loss w.r.t. its logit column."""
    return softmax(logits) - one_hot(labels, logits.shape[0])


def sample_model_labels(logits, rng):
    """Draw one label per example from the softmax distribution."""
    p = softmax(logits)
    u = rng.random(p.shape[1])
    cdf = np.cumsum(p, axis=0)
    idx = (u[None, :] > cdf).sum(axis=0).astype(np.int64)
    return np.minimum(idx, p.shape[0] - 1)
