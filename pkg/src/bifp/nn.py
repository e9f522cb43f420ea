"""Masked feed-forward binary classifiers.

A model is a stack of fully connected layers whose weights carry continuous
mask scores in [0, 1] and a derived binary mask. The forward pass multiplies
each weight matrix by its binary mask through the straight-through rule, so
gradients reach both the weights (scaled by the mask) and the scores.

Masks come in two flavors: unstructured (individual weights) and structured
(whole rows, i.e. whole output neurons). Biases are never masked.
"""

from __future__ import annotations

import json

import numpy as np

from . import autodiff as ad

CHECKPOINT_VERSION = 1

UNSTRUCTURED = "unstructured"
STRUCTURED = "structured"


class ArchitectureMismatchError(ValueError):
    pass


class MaskedLayer:
    """One fully connected layer: weight [out x in], bias [out], mask state."""

    def __init__(self, weight, bias, mask_scores, binary_mask, mode=UNSTRUCTURED):
        if mode not in (UNSTRUCTURED, STRUCTURED):
            raise ValueError(f"unknown mask mode {mode!r}")
        self.weight = ad.as_tensor(weight)
        self.bias = ad.as_tensor(bias)
        self.mask_scores = ad.as_tensor(mask_scores)
        self.binary_mask = np.asarray(binary_mask, dtype=np.float64)
        self.mode = mode
        if self.weight.shape != self.mask_scores.shape:
            raise ad.ShapeMismatchError(
                f"weight {self.weight.shape} vs mask_scores {self.mask_scores.shape}"
            )
        if self.weight.shape != self.binary_mask.shape:
            raise ad.ShapeMismatchError(
                f"weight {self.weight.shape} vs binary_mask {self.binary_mask.shape}"
            )

    @classmethod
    def init(cls, fan_in: int, fan_out: int, mode: str, rng: np.random.Generator):
        """He-normal weights, zero bias, scores = |w| rescaled to [0, 1].

        The score init makes the first top-k binary mask coincide with
        magnitude pruning, which gives every pruner the same starting point.
        """
        w = rng.standard_normal((fan_out, fan_in)) * np.sqrt(2.0 / fan_in)
        scores = np.abs(w)
        peak = scores.max()
        scores = scores / peak if peak > 0 else scores
        return cls(
            weight=ad.Tensor(w, requires_grad=True),
            bias=ad.Tensor(np.zeros(fan_out), requires_grad=True),
            mask_scores=ad.Tensor(scores, requires_grad=True),
            binary_mask=np.ones_like(w),
            mode=mode,
        )

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    def copy(self) -> "MaskedLayer":
        return MaskedLayer(
            weight=ad.Tensor(self.weight.data.copy(), requires_grad=True),
            bias=ad.Tensor(self.bias.data.copy(), requires_grad=True),
            mask_scores=ad.Tensor(self.mask_scores.data.copy(), requires_grad=True),
            binary_mask=self.binary_mask.copy(),
            mode=self.mode,
        )


class MaskedModel:
    """Feed-forward net with relu hidden layers and a single logit output."""

    def __init__(self, layers, activation: str = "relu"):
        if activation != "relu":
            raise ValueError(f"unsupported activation {activation!r}")
        if not layers:
            raise ValueError("model needs at least one layer")
        self.layers = list(layers)
        self.activation = activation

    @classmethod
    def init(cls, layer_sizes, mode=UNSTRUCTURED, seed=0):
        """Build a net with the given sizes, e.g. [d, 64, 32, 1]."""
        sizes = list(layer_sizes)
        if len(sizes) < 2 or sizes[-1] != 1:
            raise ValueError(f"layer_sizes must end in 1 output logit, got {sizes}")
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        layers = [
            MaskedLayer.init(sizes[i], sizes[i + 1], mode, rng) for i in range(len(sizes) - 1)
        ]
        return cls(layers)

    @property
    def mode(self) -> str:
        return self.layers[0].mode

    def architecture(self):
        return tuple((layer.in_features, layer.out_features) for layer in self.layers)

    def copy(self) -> "MaskedModel":
        return MaskedModel([layer.copy() for layer in self.layers], self.activation)

    # -- forward -----------------------------------------------------------

    def forward(self, x, relaxed: bool = False) -> ad.Tensor:
        """Tape-connected logits [n] for a batch x [n x d].

        With ``relaxed=True`` the continuous mask scores multiply the weights
        directly instead of the straight-through binary mask; this is the
        differentiable surrogate used to validate the straight-through rule.
        """
        h = ad.as_tensor(x)
        if h.data.ndim != 2 or h.shape[1] != self.layers[0].in_features:
            raise ad.ShapeMismatchError(
                f"input {h.shape} vs first layer [{self.layers[0].in_features} inputs]"
            )
        for i, layer in enumerate(self.layers):
            if relaxed:
                w_eff = ad.mul(layer.weight, layer.mask_scores)
            else:
                w_eff = ad.mul(
                    layer.weight, ad.straight_through(layer.mask_scores, layer.binary_mask)
                )
            z = ad.add(ad.matmul(h, ad.transpose(w_eff)), layer.bias)
            h = ad.relu(z) if i < len(self.layers) - 1 else z
        return ad.reshape(h, (h.shape[0],))

    def logits(self, x: np.ndarray) -> np.ndarray:
        """Plain numpy forward, bitwise identical to forward(x).data."""
        h = np.asarray(x, dtype=np.float64)
        if h.ndim != 2 or h.shape[1] != self.layers[0].in_features:
            raise ad.ShapeMismatchError(
                f"input {h.shape} vs first layer [{self.layers[0].in_features} inputs]"
            )
        for i, layer in enumerate(self.layers):
            w_eff = layer.weight.data * layer.binary_mask
            z = h @ w_eff.T.copy() + layer.bias.data
            h = np.maximum(z, 0.0) if i < len(self.layers) - 1 else z
        return h.reshape(h.shape[0]).copy()

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Labels in {-1, +1}; a logit of exactly 0 predicts -1."""
        return np.where(self.logits(x) > 0, 1, -1)

    # -- parameters and masks ------------------------------------------------

    def parameters(self):
        """Weight and bias tensors (the inner-level variables)."""
        out = []
        for layer in self.layers:
            out.append(layer.weight)
            out.append(layer.bias)
        return out

    def score_tensors(self):
        return [layer.mask_scores for layer in self.layers]

    def maskable_count(self) -> int:
        return sum(layer.weight.data.size for layer in self.layers)

    def kept_count(self) -> int:
        return int(sum(layer.binary_mask.sum() for layer in self.layers))

    def sparsity(self) -> float:
        """Fraction of maskable weights that are zeroed: 1 - kept/total."""
        return 1.0 - self.kept_count() / self.maskable_count()

    def clamp_scores(self) -> None:
        for layer in self.layers:
            np.clip(layer.mask_scores.data, 0.0, 1.0, out=layer.mask_scores.data)

    def binarize_masks(self, sparsity: float, scope: str = "global") -> None:
        """Project continuous scores to a binary mask at the given sparsity.

        Unstructured mode keeps the top-k scores (k = round((1-s) * count));
        structured mode ranks whole rows by mean score and keeps the prefix
        whose kept-weight fraction is closest to 1-s. Ties break toward the
        lowest flat index, every layer keeps at least one weight (or row),
        and the projection is idempotent at fixed scores and sparsity.
        """
        if not 0.0 <= sparsity < 1.0:
            raise ValueError(f"sparsity must be in [0, 1), got {sparsity}")
        if scope not in ("global", "per-layer"):
            raise ValueError(f"unknown scope {scope!r}")
        if self.mode == STRUCTURED:
            self._binarize_structured(sparsity, scope)
        else:
            self._binarize_unstructured(sparsity, scope)

    def _binarize_unstructured(self, sparsity: float, scope: str) -> None:
        if scope == "per-layer":
            for layer in self.layers:
                flat = layer.mask_scores.data.ravel()
                k = max(1, round((1.0 - sparsity) * flat.size))
                order = np.argsort(-flat, kind="stable")
                mask = np.zeros(flat.size)
                mask[order[:k]] = 1.0
                layer.binary_mask = mask.reshape(layer.binary_mask.shape)
            return

        flat = np.concatenate([layer.mask_scores.data.ravel() for layer in self.layers])
        total = flat.size
        k = max(1, round((1.0 - sparsity) * total))
        order = np.argsort(-flat, kind="stable")
        kept = np.zeros(total, dtype=bool)
        kept[order[:k]] = True

        # every layer keeps at least one weight: promote a layer's best entry
        # and evict the globally worst kept entry from a layer that can spare one
        offsets = np.cumsum([0] + [layer.weight.data.size for layer in self.layers])
        rank = np.empty(total, dtype=np.int64)
        rank[order] = np.arange(total)
        for i, layer in enumerate(self.layers):
            lo, hi = offsets[i], offsets[i + 1]
            if kept[lo:hi].any():
                continue
            best = lo + int(np.argmin(rank[lo:hi]))
            kept[best] = True
            evictable = [
                j
                for j in order[:k][::-1]
                if kept[j] and self._layer_of(j, offsets) != i and self._kept_in_layer(
                    kept, offsets, self._layer_of(j, offsets)
                ) > 1
            ]
            if evictable:
                kept[evictable[0]] = False

        for i, layer in enumerate(self.layers):
            lo, hi = offsets[i], offsets[i + 1]
            layer.binary_mask = kept[lo:hi].astype(np.float64).reshape(layer.binary_mask.shape)

    @staticmethod
    def _layer_of(flat_index: int, offsets) -> int:
        return int(np.searchsorted(offsets, flat_index, side="right") - 1)

    @staticmethod
    def _kept_in_layer(kept, offsets, i) -> int:
        return int(kept[offsets[i]: offsets[i + 1]].sum())

    def _binarize_structured(self, sparsity: float, scope: str) -> None:
        target = 1.0 - sparsity
        if scope == "per-layer":
            for layer in self.layers:
                means = layer.mask_scores.data.mean(axis=1)
                rows = means.size
                keep = min(rows, max(1, round(target * rows)))
                order = np.argsort(-means, kind="stable")
                mask = np.zeros_like(layer.binary_mask)
                mask[order[:keep], :] = 1.0
                layer.binary_mask = mask
            return

        # global: rank all rows by mean score, force each layer's best row,
        # then extend the kept prefix while it moves the kept fraction closer
        # to the target
        rows = []  # (mean score, layer index, row index, width)
        for li, layer in enumerate(self.layers):
            means = layer.mask_scores.data.mean(axis=1)
            for ri in range(means.size):
                rows.append((means[ri], li, ri, layer.in_features))
        order = sorted(range(len(rows)), key=lambda i: (-rows[i][0], rows[i][1], rows[i][2]))
        total = self.maskable_count()

        kept = set()
        kept_weights = 0
        seen_layers = set()
        for i in order:
            li = rows[i][1]
            if li not in seen_layers:
                seen_layers.add(li)
                kept.add(i)
                kept_weights += rows[i][3]
        for i in order:
            if i in kept:
                continue
            width = rows[i][3]
            if abs((kept_weights + width) / total - target) < abs(kept_weights / total - target):
                kept.add(i)
                kept_weights += width
            else:
                break

        masks = [np.zeros_like(layer.binary_mask) for layer in self.layers]
        for i in kept:
            _, li, ri, _ = rows[i]
            masks[li][ri, :] = 1.0
        for layer, mask in zip(self.layers, masks):
            layer.binary_mask = mask

    # -- flat effective-weight vector ----------------------------------------

    def effective_weights(self) -> np.ndarray:
        """All binary_mask * weight entries, then all biases, layer by layer."""
        parts = [(layer.binary_mask * layer.weight.data).ravel() for layer in self.layers]
        parts += [layer.bias.data.copy() for layer in self.layers]
        return np.concatenate(parts)

    def load_effective_weights(self, vec: np.ndarray) -> None:
        """Inverse of effective_weights; masked weight entries load as zero."""
        vec = np.asarray(vec, dtype=np.float64)
        expected = self.maskable_count() + sum(l.bias.data.size for l in self.layers)
        if vec.size != expected:
            raise ad.ShapeMismatchError(f"vector of size {vec.size} vs expected {expected}")
        pos = 0
        for layer in self.layers:
            n = layer.weight.data.size
            layer.weight.data = vec[pos: pos + n].reshape(layer.weight.shape).copy()
            pos += n
        for layer in self.layers:
            n = layer.bias.data.size
            layer.bias.data = vec[pos: pos + n].copy()
            pos += n

    # -- checkpoints -----------------------------------------------------------

    def save(self, path) -> None:
        doc = {
            "version": CHECKPOINT_VERSION,
            "activation": self.activation,
            "mode": self.mode,
            "layers": [
                {
                    "weight": layer.weight.data.tolist(),
                    "bias": layer.bias.data.tolist(),
                    "mask_scores": layer.mask_scores.data.tolist(),
                    "binary_mask": layer.binary_mask.tolist(),
                }
                for layer in self.layers
            ],
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh)

    @classmethod
    def load(cls, path) -> "MaskedModel":
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        if doc.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
        layers = [
            MaskedLayer(
                weight=ad.Tensor(np.array(spec["weight"]), requires_grad=True),
                bias=ad.Tensor(np.array(spec["bias"]), requires_grad=True),
                mask_scores=ad.Tensor(np.array(spec["mask_scores"]), requires_grad=True),
                binary_mask=np.array(spec["binary_mask"]),
                mode=doc["mode"],
            )
            for spec in doc["layers"]
        ]
        return cls(layers, activation=doc["activation"])


def check_same_architecture(a: MaskedModel, b: MaskedModel) -> None:
    if a.architecture() != b.architecture():
        raise ArchitectureMismatchError(
            f"architectures differ: {a.architecture()} vs {b.architecture()}"
        )
