"""Frozen base classifier with low-rank adaptation sites."""
import hashlib

import numpy as np

from fdlora import kernels
from fdlora.errors import ConfigError, ShapeError
from fdlora.lora import AdapterSet, init_adapter
from fdlora.numerics import Tape, Var, as_matrix, backward, cross_entropy


class BaseModel:
    """Tanh MLP whose weights are frozen.

    Layer ``i`` is the site ``layer<i>`` with weight of shape (out, in), so an
    adapter for it has d = out and k = in. Only sites listed in
    ``adapted_sites`` accept adapters.
    """

    def __init__(self, weights, biases, adapted_sites=None):
        if len(weights) != len(biases) or not weights:
            raise ConfigError("need one bias per weight and at least one layer")
        self.site_ids = [f"layer{i}" for i in range(len(weights))]
        self._weights = []
        self._biases = []
        self._weights_t = []
        for i, (w, b) in enumerate(zip(weights, biases)):
            w = as_matrix(w, f"layer{i} weight").copy()
            b = as_matrix(b, f"layer{i} bias").copy()
            if b.shape != (1, w.shape[0]):
                raise ShapeError(f"layer{i}: bias {b.shape} does not match weight {w.shape}")
            if i and w.shape[1] != self._weights[-1].shape[0]:
                raise ShapeError(f"layer{i}: input width {w.shape[1]} does not chain")
            w.setflags(write=False)
            b.setflags(write=False)
            wt = np.ascontiguousarray(w.T)
            wt.setflags(write=False)
            self._weights.append(w)
            self._biases.append(b)
            self._weights_t.append(wt)
        if adapted_sites is None:
            adapted_sites = self.site_ids
        unknown = set(adapted_sites) - set(self.site_ids)
        if unknown:
            raise ConfigError(f"unknown adaptation sites: {sorted(unknown)}")
        self.adapted_sites = tuple(s for s in self.site_ids if s in set(adapted_sites))

    @classmethod
    def mlp(cls, sizes, seed, adapted_sites=None):
        """Random frozen MLP with layer widths ``sizes`` (input first)."""
        if len(sizes) < 2:
            raise ConfigError("an MLP needs at least input and output sizes")
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            weights.append(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_out, fan_in)))
            biases.append(rng.normal(0.0, 0.1, size=(1, fan_out)))
        return cls(weights, biases, adapted_sites)

    @property
    def input_dim(self):
        return self._weights[0].shape[1]

    @property
    def num_classes(self):
        return self._weights[-1].shape[0]

    def site_shape(self, site_id):
        return self._weights[self.site_ids.index(site_id)].shape

    def weight(self, site_id):
        return self._weights[self.site_ids.index(site_id)]

    def bias(self, site_id):
        return self._biases[self.site_ids.index(site_id)]

    def total_params(self, adapters=None):
        frozen = sum(w.size + b.size for w, b in zip(self._weights, self._biases))
        return frozen + (adapters.num_entries() if adapters is not None else 0)

    def checksum(self):
        h = hashlib.sha256()
        for w, b in zip(self._weights, self._biases):
            h.update(w.tobytes())
            h.update(b.tobytes())
        return h.hexdigest()

    def init_adapters(self, rank, rng, seed=None):
        return AdapterSet(
            init_adapter(s, *self.site_shape(s), rank, rng, seed=seed)
            for s in self.adapted_sites
        )

    def _check_adapters(self, adapters):
        for site, ad in adapters.items():
            if site not in self.adapted_sites:
                raise ConfigError(f"site {site!r} is not adaptable in this model")
            if ad.shape != self.site_shape(site):
                raise ShapeError(
                    f"site {site!r}: adapter update {ad.shape} vs weight "
                    f"{self.site_shape(site)}"
                )

    def logits(self, x, adapters=None):
        """Forward pass without recording; same op order as :meth:`loss_and_grads`."""
        h = as_matrix(x, "features")
        if adapters is not None:
            self._check_adapters(adapters)
        last = len(self._weights) - 1
        for i, site in enumerate(self.site_ids):
            pre = kernels.matmul(h, self._weights_t[i]) + self._biases[i]
            if adapters is not None and site in adapters:
                ad = adapters[site]
                low = kernels.matmul(h, np.ascontiguousarray(ad.a_factor.T))
                pre = pre + kernels.matmul(low, np.ascontiguousarray(ad.b_factor.T))
            h = pre if i == last else np.tanh(pre)
        return h

    def predict(self, x, adapters=None):
        return np.argmax(self.logits(x, adapters), axis=1)

    def loss_and_grads(self, x, y, adapters):
        """Mean cross-entropy and its gradient w.r.t. every adapter factor.

        Gradients come back keyed like ``AdapterSet.params()``; the frozen
        weights are tape constants and never appear.
        """
        self._check_adapters(adapters)
        tape = Tape()
        leaves = {}
        for site, ad in adapters.items():
            leaves[f"{site}.b"] = tape.variable(ad.b_factor)
            leaves[f"{site}.a"] = tape.variable(ad.a_factor)
        h = as_matrix(x, "features")
        last = len(self._weights) - 1
        for i, site in enumerate(self.site_ids):
            if isinstance(h, Var):
                pre = tape.add(tape.matmul(h, self._weights_t[i]), self._biases[i])
            else:
                # still upstream of every adapter: plain arrays, off the tape
                pre = kernels.matmul(h, self._weights_t[i]) + self._biases[i]
            if site in adapters:
                low = tape.matmul(h, tape.transpose(leaves[f"{site}.a"]))
                pre = tape.add(pre, tape.matmul(low, tape.transpose(leaves[f"{site}.b"])))
            if i == last:
                h = pre
            else:
                h = tape.tanh(pre) if isinstance(pre, Var) else np.tanh(pre)
        if not isinstance(h, Var):
            return cross_entropy(h, y), {}
        root, loss = tape.cross_entropy(h, y)
        adj = backward(tape, root)
        return loss, {name: adj[v.id] for name, v in leaves.items()}

    def loss(self, x, y, adapters=None):
        return cross_entropy(self.logits(x, adapters), y)
