"""Central finite-difference checks of tape gradients, in double precision."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .bilstm2d import BiLstm2dParams, bilstm2d_forward
from .model import DpseqModel, Linear, ModelConfig, SequencerBlockParams, sequencer_block
from .tensor import Tape, Tensor, dropout, relu
from .training import weighted_cross_entropy

TOLERANCE = 1e-4
STEP = 1e-5
# gradients smaller than this are compared in absolute terms
FLOOR = 1e-6


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    n_checked: int
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = FLOOR) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def check_gradients(loss_fn: Callable[[], Tensor], params: dict[str, Tensor], step: float = STEP,
                    max_entries: int | None = None, rng: np.random.Generator | None = None,
                    corrupt: Callable[[str, np.ndarray], np.ndarray] | None = None) -> dict[str, tuple[float, int]]:
    """Compare ``loss_fn``'s tape gradients against central differences.

    ``max_entries`` caps the coordinates probed per tensor (drawn from
    ``rng``). ``corrupt`` lets tests tamper with an analytic gradient.
    Returns ``{name: (max relative error, coordinates checked)}``.
    """
    with Tape() as tape:
        loss = loss_fn()
    grads = tape.backward(loss)
    rng = rng or np.random.default_rng(0)
    out = {}
    for name, t in params.items():
        g = grads.get(t, np.zeros_like(t.data))
        if corrupt is not None:
            g = corrupt(name, g)
        coords = list(np.ndindex(t.shape))
        if max_entries is not None and len(coords) > max_entries:
            pick = rng.choice(len(coords), size=max_entries, replace=False)
            coords = [coords[i] for i in sorted(pick)]
        worst = 0.0
        for idx in coords:
            old = t.data[idx]
            t.data[idx] = old + step
            fp = loss_fn().item()
            t.data[idx] = old - step
            fm = loss_fn().item()
            t.data[idx] = old
            num = (fp - fm) / (2 * step)
            worst = max(worst, float(relative_error(np.array(g[idx]), np.array(num))))
        out[name] = (worst, len(coords))
    return out


def _summarize(name: str, per_tensor: dict[str, tuple[float, int]]) -> CheckResult:
    return CheckResult(name, max(v[0] for v in per_tensor.values()), sum(v[1] for v in per_tensor.values()))


def _projection(rng, shape) -> Tensor:
    return Tensor(rng.normal(size=shape))


def check_bilstm2d(seed: int, h: int = 4, w: int = 4, c: int = 8, d: int = 4, corrupt=None) -> CheckResult:
    rng = np.random.default_rng(seed)
    p = BiLstm2dParams.init(c, d, rng, np.float64)
    for _, t in p.named_parameters():
        if t.ndim == 1:
            t.data = rng.normal(scale=0.1, size=t.shape)
    x = Tensor(rng.normal(size=(h, w, c)), requires_grad=True)
    proj = _projection(rng, (h, w, c))
    params = dict(p.named_parameters())
    params["input"] = x
    res = check_gradients(lambda: (bilstm2d_forward(x, p) * proj).sum(), params, corrupt=corrupt)
    return _summarize("bilstm2d", res)


def check_block(seed: int, h: int = 4, w: int = 4, e: int = 8, d: int = 4, corrupt=None) -> CheckResult:
    rng = np.random.default_rng(seed)
    blk = SequencerBlockParams.init(e, d, 3, rng, np.float64)
    for _, t in blk.named_parameters("", "mixer."):
        if t.ndim == 1:
            t.data = t.data + rng.normal(scale=0.1, size=t.shape)
    x = Tensor(rng.normal(size=(1, h, w, e)), requires_grad=True)
    proj = _projection(rng, (1, h, w, e))
    params = dict(blk.named_parameters("", "mixer."))
    params["input"] = x
    res = check_gradients(lambda: (sequencer_block(x, blk) * proj).sum(), params, corrupt=corrupt)
    return _summarize("block", res)


def check_head(seed: int, widths=(12, 8, 4), n_classes: int = 2, corrupt=None) -> CheckResult:
    rng = np.random.default_rng(seed)
    layers = [Linear.init(a, b, rng, np.float64) for a, b in zip(widths[:-1], widths[1:])]
    for layer in layers:
        layer.b.data = rng.normal(scale=0.1, size=layer.b.shape)
    clf = Linear.init(widths[-1], n_classes, rng, np.float64)
    x = Tensor(rng.normal(size=(3, widths[0])), requires_grad=True)
    labels = rng.integers(0, n_classes, size=3)

    def loss():
        h = x
        for layer in layers:
            h = dropout(relu(layer(h)), 0.1, None)
        return weighted_cross_entropy(clf(h), labels)

    params = {"input": x}
    for j, layer in enumerate(layers):
        params.update(dict(layer.named_parameters(f"head.{j}.")))
    params.update(dict(clf.named_parameters("classifier.")))
    return _summarize("head", check_gradients(loss, params, corrupt=corrupt))


def check_loss(seed: int, batch: int = 5, k: int = 3, corrupt=None) -> CheckResult:
    rng = np.random.default_rng(seed)
    logits = Tensor(rng.normal(size=(batch, k)), requires_grad=True)
    labels = rng.integers(0, k, size=batch)
    weights = rng.uniform(0.5, 3.0, size=k)
    res = check_gradients(lambda: weighted_cross_entropy(logits, labels, weights), {"logits": logits},
                          corrupt=corrupt)
    return _summarize("loss", res)


def reduced_config() -> ModelConfig:
    return ModelConfig.small(dims=(8, 8, 8, 8), hidden=(2, 2, 2, 2), head_dims=(8, 4), mlp_ratio=2)


def check_model(seed: int, max_entries: int | None = 12, corrupt=None) -> CheckResult:
    """End-to-end check of a reduced network on a 28x28 tile."""
    rng = np.random.default_rng(seed)
    model = DpseqModel(reduced_config(), seed=seed, dtype=np.float64)
    for _, t in model.named_parameters():
        if t.ndim == 1:
            t.data = t.data + rng.normal(scale=0.1, size=t.shape)
    x = Tensor(rng.normal(size=(2, 28, 28, 3)), requires_grad=True)
    labels = np.array([0, 1])
    params = dict(model.named_parameters())
    params["input"] = x
    res = check_gradients(lambda: weighted_cross_entropy(model.forward(x), labels, [1.0, 2.0]), params,
                          max_entries=max_entries, rng=np.random.default_rng(seed + 1000), corrupt=corrupt)
    return _summarize("model", res)


CHECKS = {
    "bilstm2d": check_bilstm2d,
    "block": check_block,
    "head": check_head,
    "loss": check_loss,
    "model": check_model,
}


def run_all(seeds=range(5), layers=None, corrupt_layer: str | None = None) -> list[CheckResult]:
    """One row per layer, reporting the worst error over ``seeds``."""
    rows = []
    for name in layers or CHECKS:
        corrupt = None
        if name == corrupt_layer:
            def corrupt(_n, g):
                return g * 1.01 + 1e-3
        results = [CHECKS[name](s, corrupt=corrupt) for s in seeds]
        rows.append(CheckResult(name, max(r.max_rel_err for r in results), sum(r.n_checked for r in results)))
    return rows
