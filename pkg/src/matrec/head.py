"""Trainable classifier heads: dense / batchnorm / relu / dropout / softmax.

Everything is hand-rolled numpy with analytic gradients; correctness is
pinned by a central finite-difference oracle in the test suite. Heads are
the small stacks appended to frozen backbone features (flatten -> ... ->
softmax); the four canonical stacks live in CANONICAL_HEADS.
"""

from dataclasses import dataclass

import numpy as np

BN_EPS = 1e-5
LOG_CLAMP = 1e-12  # inside cross-entropy, avoids -inf on confident errors


class HeadError(ValueError):
    pass


@dataclass(frozen=True)
class HeadSpec:
    name: str
    flatten_in: int
    layers: tuple          # tuple of ("dropout", rate) | ("dense", out) |
                           # ("batchnorm", momentum) | ("relu",) | ("softmax",)
    out_classes: int

    def __post_init__(self):
        if not self.layers or self.layers[-1][0] != "softmax":
            raise HeadError("head must end with softmax")
        dim = self.flatten_in
        for layer in self.layers:
            kind = layer[0]
            if kind == "dense":
                dim = int(layer[1])
            elif kind not in ("dropout", "batchnorm", "relu", "softmax"):
                raise HeadError(f"unknown layer kind {kind!r}")
        if dim != self.out_classes:
            raise HeadError(
                f"layer chain ends at {dim}, expected {self.out_classes} classes")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "flatten_in": self.flatten_in,
            "layers": [list(l) for l in self.layers],
            "out_classes": self.out_classes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HeadSpec":
        return cls(
            name=d["name"],
            flatten_in=int(d["flatten_in"]),
            layers=tuple(tuple(l) for l in d["layers"]),
            out_classes=int(d["out_classes"]),
        )


def _wide_head(flatten_in, out_classes, hidden=1024):
    return (
        ("dropout", 0.3),
        ("dense", hidden),
        ("batchnorm", 0.99),
        ("relu",),
        ("dropout", 0.3),
        ("dense", hidden),
        ("batchnorm", 0.99),
        ("relu",),
        ("dropout", 0.5),
        ("dense", out_classes),
        ("softmax",),
    )


def _single_dense_head(out_classes):
    return (("dropout", 0.5), ("dense", out_classes), ("softmax",))


def canonical_head_spec(name: str, out_classes=None, hidden: int = 1024,
                        flatten_in=None) -> HeadSpec:
    """The four published stacks; out_classes/hidden/flatten_in overridable
    for reduced-width tests and toy backbones."""
    defaults = {
        "vgg16": (7 * 7 * 512, 11),
        "resnet152": (7 * 7 * 2048, 11),
        "densenet121": (7 * 7 * 1024, 12),
        "nasnet-mobile": (7 * 7 * 1056, 12),
    }
    if name not in defaults:
        raise HeadError(f"unknown head spec {name!r}; choose from {sorted(defaults)}")
    default_in, default_out = defaults[name]
    flatten_in = default_in if flatten_in is None else int(flatten_in)
    out_classes = default_out if out_classes is None else int(out_classes)
    if name == "vgg16":
        layers = _wide_head(flatten_in, out_classes, hidden)
    else:
        layers = _single_dense_head(out_classes)
    return HeadSpec(name=name, flatten_in=flatten_in,
                    layers=layers, out_classes=out_classes)


def build_head_params(spec: HeadSpec, seed: int, dtype=np.float32) -> dict:
    """He-uniform dense weights, zero biases, identity batchnorm."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), 0x48454144])))
    params = {}
    dim = spec.flatten_in
    for i, layer in enumerate(spec.layers):
        kind = layer[0]
        if kind == "dense":
            out = int(layer[1])
            limit = np.sqrt(6.0 / dim)
            params[f"{i}:dense/W"] = rng.uniform(-limit, limit, size=(dim, out)).astype(dtype)
            params[f"{i}:dense/b"] = np.zeros(out, dtype=dtype)
            dim = out
        elif kind == "batchnorm":
            params[f"{i}:bn/gamma"] = np.ones(dim, dtype=dtype)
            params[f"{i}:bn/beta"] = np.zeros(dim, dtype=dtype)
            params[f"{i}:bn/running_mean"] = np.zeros(dim, dtype=dtype)
            params[f"{i}:bn/running_var"] = np.ones(dim, dtype=dtype)
    return params


def param_count(spec: HeadSpec) -> int:
    return sum(p.size for p in build_head_params(spec, seed=0).values())


def trainable_param_names(params: dict):
    return [k for k in params if not k.endswith(("running_mean", "running_var"))]


class Head:
    """A head spec bound to parameters, with forward and backward passes."""

    def __init__(self, spec: HeadSpec, params: dict):
        self.spec = spec
        self.params = params

    @classmethod
    def build(cls, spec: HeadSpec, seed: int, dtype=np.float32) -> "Head":
        return cls(spec, build_head_params(spec, seed, dtype))

    def forward(self, X, mode: str = "infer", rng=None, update_stats: bool = True):
        """Probabilities for a feature batch.

        infer: deterministic (dropout off, batchnorm running stats).
        train: inverted dropout (needs rng) and batch statistics;
        running stats get the momentum update unless update_stats=False.
        Returns (probs, cache) where cache feeds backward().
        """
        X = np.asarray(X)
        if not np.all(np.isfinite(X)):
            raise HeadError("non-finite values in head input")
        if X.ndim != 2 or X.shape[1] != self.spec.flatten_in:
            raise HeadError(
                f"expected (n, {self.spec.flatten_in}) features, got {X.shape}")
        if mode not in ("train", "infer"):
            raise HeadError(f"bad mode {mode!r}")
        train = mode == "train"
        if train and rng is None:
            raise HeadError("train-mode forward needs an rng for dropout masks")

        h = X
        cache = []
        for i, layer in enumerate(self.spec.layers):
            kind = layer[0]
            if kind == "dropout":
                rate = float(layer[1])
                if train and rate > 0:
                    keep = (rng.random(h.shape) >= rate).astype(h.dtype)
                    scale = 1.0 / (1.0 - rate)
                    cache.append(("dropout", keep, scale))
                    h = h * keep * scale
                else:
                    cache.append(("dropout", None, 1.0))
            elif kind == "dense":
                W = self.params[f"{i}:dense/W"]
                b = self.params[f"{i}:dense/b"]
                cache.append(("dense", i, h))
                h = h @ W + b
            elif kind == "batchnorm":
                gamma = self.params[f"{i}:bn/gamma"]
                beta = self.params[f"{i}:bn/beta"]
                if train:
                    mean = h.mean(axis=0)
                    var = h.var(axis=0)
                    if update_stats:
                        m = float(layer[1])
                        rm = self.params[f"{i}:bn/running_mean"]
                        rv = self.params[f"{i}:bn/running_var"]
                        rm[...] = m * rm + (1 - m) * mean
                        rv[...] = m * rv + (1 - m) * var
                else:
                    mean = self.params[f"{i}:bn/running_mean"]
                    var = self.params[f"{i}:bn/running_var"]
                inv_std = 1.0 / np.sqrt(var + BN_EPS)
                norm = (h - mean) * inv_std
                cache.append(("batchnorm", i, h, mean, var, inv_std, norm, train))
                h = gamma * norm + beta
            elif kind == "relu":
                cache.append(("relu", h > 0))
                h = np.maximum(h, 0)
            elif kind == "softmax":
                z = h - h.max(axis=1, keepdims=True)
                e = np.exp(z)
                probs = e / e.sum(axis=1, keepdims=True)
                cache.append(("softmax", probs))
                h = probs
        return h, cache

    def loss_and_grad(self, X, labels, rng=None, update_stats: bool = True):
        """Mean categorical cross-entropy and gradients for every parameter.

        Softmax and cross-entropy are fused in the backward pass; dropout
        reuses the forward masks; batchnorm backward goes through the full
        batch statistics.
        """
        labels = np.asarray(labels)
        if labels.min() < 0 or labels.max() >= self.spec.out_classes:
            raise HeadError("label out of range")
        probs, cache = self.forward(X, mode="train", rng=rng,
                                    update_stats=update_stats)
        n = probs.shape[0]
        picked = np.clip(probs[np.arange(n), labels], LOG_CLAMP, None)
        loss = float(-np.mean(np.log(picked)))
        if not np.isfinite(loss):
            raise HeadError("non-finite loss (divergence)")

        grads = {k: np.zeros_like(v) for k, v in self.params.items()
                 if not k.endswith(("running_mean", "running_var"))}
        onehot = np.zeros_like(probs)
        onehot[np.arange(n), labels] = 1.0
        delta = None
        for entry in reversed(cache):
            kind = entry[0]
            if kind == "softmax":
                delta = (entry[1] - onehot) / n
            elif kind == "relu":
                delta = delta * entry[1]
            elif kind == "dense":
                _, i, h_in = entry
                grads[f"{i}:dense/W"] = h_in.T @ delta
                grads[f"{i}:dense/b"] = delta.sum(axis=0)
                delta = delta @ self.params[f"{i}:dense/W"].T
            elif kind == "batchnorm":
                _, i, h_in, mean, var, inv_std, norm, _train = entry
                gamma = self.params[f"{i}:bn/gamma"]
                grads[f"{i}:bn/gamma"] = (delta * norm).sum(axis=0)
                grads[f"{i}:bn/beta"] = delta.sum(axis=0)
                m = h_in.shape[0]
                dnorm = delta * gamma
                diff = h_in - mean
                dvar = (dnorm * diff * (-0.5) * inv_std ** 3).sum(axis=0)
                dmean = (-(dnorm * inv_std).sum(axis=0)
                         - 2.0 / m * dvar * diff.sum(axis=0))
                delta = dnorm * inv_std + dvar * 2.0 / m * diff + dmean / m
            elif kind == "dropout":
                _, keep, scale = entry
                if keep is not None:
                    delta = delta * keep * scale
        return loss, grads
