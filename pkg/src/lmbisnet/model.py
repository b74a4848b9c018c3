"""LMBiS-Net graph: encoder, multipath block, bottleneck, decoder, reverse skips.

Layout for stage widths ``(w1, w2, w3)`` and multipath width ``m``::

    enc1  conv3 in->w1   (H)      pool -> H/2
    enc2  conv3 w1->w2   (H/2)    pool -> H/4
    enc3  conv3 w2->w3   (H/4)    no pool
    mp1   {1,3,5} w3->m  summed
    mp2   {1,3,5} m->m   summed
    bott1 conv3 m->w3, bott2 conv3 w3->w3
    dec3  conv3 w3->w2 on  bott2 + skip3(f3)
    dec2  conv3 w2->w1 on  up2(dec3) + skip2(f2)
    dec1  conv3 w1->w1 on  up1(dec2) + skip1(f1)
    head  conv1 w1->num_classes, softmax

Every "conv3"/"conv1x1..5" unit above is conv -> ReLU -> BN. With two
passes, the second pass adds ``rev1(dec1)``, ``rev2(dec2)``, ``rev3(dec3)``
from the first pass to the inputs of enc1, enc2, enc3. Weights are shared
between passes.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .tensor import (
    DTYPE,
    BatchNormState,
    ConvParams,
    add,
    batchnorm2d,
    batchnorm2d_backward,
    conv2d,
    conv2d_backward,
    conv_transpose2d,
    conv_transpose2d_backward,
    maxpool2,
    maxpool2_backward,
    relu,
    relu_backward,
    softmax_channels,
    softmax_channels_backward,
)

# Found by search_stage_widths() starting from (14, 28, 56) / 28.
DEFAULT_STAGE_WIDTHS = (14, 28, 56)
DEFAULT_MULTIPATH_WIDTH = 28

MULTIPATH_KERNELS = (1, 3, 5)
PARAM_BUDGET = 172_000


@dataclass(frozen=True)
class NetworkConfig:
    input_channels: int = 3
    num_classes: int = 2
    stage_widths: tuple = DEFAULT_STAGE_WIDTHS
    multipath_width: int = DEFAULT_MULTIPATH_WIDTH
    pass_count: int = 2
    seed: int = 0
    multipath: bool = True

    def __post_init__(self):
        object.__setattr__(self, "stage_widths", tuple(int(w) for w in self.stage_widths))
        if len(self.stage_widths) != 3 or min(self.stage_widths) <= 0:
            raise ValueError(f"stage_widths must be three positive counts, got {self.stage_widths}")
        if self.multipath_width <= 0 or self.input_channels <= 0:
            raise ValueError("widths must be positive")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if self.pass_count not in (1, 2):
            raise ValueError(f"pass_count must be 1 or 2, got {self.pass_count}")

    @property
    def bidirectional(self) -> bool:
        return self.pass_count == 2


TINY_CONFIG = NetworkConfig(stage_widths=(2, 4, 8), multipath_width=4)


class LayerSpec(NamedTuple):
    name: str
    kind: str  # "unit" (conv+ReLU+BN), "conv" (plain), "up" (transposed 2x2)
    c_in: int
    c_out: int
    k: int


def layer_specs(config: NetworkConfig) -> list[LayerSpec]:
    w1, w2, w3 = config.stage_widths
    m = config.multipath_width
    specs = [
        LayerSpec("enc1", "unit", config.input_channels, w1, 3),
        LayerSpec("enc2", "unit", w1, w2, 3),
        LayerSpec("enc3", "unit", w2, w3, 3),
    ]
    if config.multipath:
        for stage, c_in in (("mp1", w3), ("mp2", m)):
            specs += [LayerSpec(f"{stage}.b{k}", "unit", c_in, m, k) for k in MULTIPATH_KERNELS]
    else:
        specs.append(LayerSpec("mp", "unit", w3, m, 3))
    specs += [
        LayerSpec("bott1", "unit", m, w3, 3),
        LayerSpec("bott2", "unit", w3, w3, 3),
        LayerSpec("skip3", "conv", w3, w3, 1),
        LayerSpec("dec3", "unit", w3, w2, 3),
        LayerSpec("up2", "up", w2, w2, 2),
        LayerSpec("skip2", "conv", w2, w2, 1),
        LayerSpec("dec2", "unit", w2, w1, 3),
        LayerSpec("up1", "up", w1, w1, 2),
        LayerSpec("skip1", "conv", w1, w1, 1),
        LayerSpec("dec1", "unit", w1, w1, 3),
        LayerSpec("head", "conv", w1, config.num_classes, 1),
    ]
    if config.bidirectional:
        specs += [
            LayerSpec("rev1", "conv", w1, config.input_channels, 1),
            LayerSpec("rev2", "conv", w1, w1, 1),
            LayerSpec("rev3", "conv", w2, w2, 1),
        ]
    return specs


_tokens = itertools.count(1)

PASS_SEP = "@pass"


def bn_key(name: str, pass_index: int) -> str:
    """Key of a unit's BN state for a pass; later passes keep their own running statistics."""
    return name if pass_index == 0 else f"{name}{PASS_SEP}{pass_index + 1}"


@dataclass(eq=False)
class Model:
    config: NetworkConfig
    params: dict = field(default_factory=dict)
    bn_states: dict = field(default_factory=dict)
    _last_token: int = field(default=0, repr=False)

    def conv(self, name: str) -> ConvParams:
        w, b = self.params[f"{name}.weight"], self.params[f"{name}.bias"]
        if w.shape[2] == 2:
            return ConvParams(w, b, stride=2, padding=0)
        return ConvParams(w, b)

    def unit(self, name: str, pass_index: int = 0) -> "ConvUnit":
        return ConvUnit(name, self.conv(name), self.bn_states[bn_key(name, pass_index)])

    def astype(self, dtype) -> "Model":
        """Deep copy with parameters and running statistics cast to ``dtype``."""
        params = {k: np.array(v, dtype=dtype) for k, v in self.params.items()}
        bn_states = {}
        for key, st in self.bn_states.items():
            name = key.split(PASS_SEP)[0]
            bn_states[key] = BatchNormState(
                gamma=params[f"{name}.bn.gamma"],
                beta=params[f"{name}.bn.beta"],
                running_mean=None if st.running_mean is None else np.array(st.running_mean, dtype=dtype),
                running_var=None if st.running_var is None else np.array(st.running_var, dtype=dtype),
                eps=st.eps,
                momentum=st.momentum,
            )
        return Model(self.config, params, bn_states)

    def copy(self) -> "Model":
        return self.astype(next(iter(self.params.values())).dtype if self.params else DTYPE)


def build_network(config: NetworkConfig, budget: int | None = None, dtype=DTYPE) -> Model:
    """Allocate and initialize all parameters.

    Convolution weights are drawn from N(0, 2 / fan_in) with
    ``fan_in = c_in * k * k`` (``c_in`` for the 2x2 transposed convolutions,
    where each output pixel sees one kernel tap). Biases start at zero,
    BN gamma at 1 and beta at 0. If ``budget`` is given, a config whose
    parameter count exceeds it is rejected.
    """
    if budget is not None:
        n = analytic_parameter_count(config)
        if n > budget:
            raise ValueError(f"config has {n} parameters, over the budget of {budget}")
    rng = np.random.default_rng(config.seed)
    model = Model(config)
    for spec in layer_specs(config):
        if spec.kind == "up":
            shape, fan_in = (spec.c_in, spec.c_out, 2, 2), spec.c_in
        else:
            shape, fan_in = (spec.c_out, spec.c_in, spec.k, spec.k), spec.c_in * spec.k * spec.k
        model.params[f"{spec.name}.weight"] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
        model.params[f"{spec.name}.bias"] = np.zeros(spec.c_out, dtype)
        if spec.kind == "unit":
            st = BatchNormState.fresh(spec.c_out, dtype)
            model.params[f"{spec.name}.bn.gamma"] = st.gamma
            model.params[f"{spec.name}.bn.beta"] = st.beta
            model.bn_states[spec.name] = st
            for p in range(1, config.pass_count):
                model.bn_states[bn_key(spec.name, p)] = BatchNormState(
                    st.gamma, st.beta, np.zeros(spec.c_out, dtype), np.ones(spec.c_out, dtype)
                )
    return model


def count_parameters(model: Model) -> int:
    """Trainable element count (weights, biases, BN gamma/beta)."""
    return int(sum(p.size for p in model.params.values()))


def analytic_parameter_count(config: NetworkConfig) -> int:
    """Closed-form parameter count, written out independently of ``layer_specs``."""
    w1, w2, w3 = config.stage_widths
    m, c, nc = config.multipath_width, config.input_channels, config.num_classes

    def unit(k, ci, co):
        return k * k * ci * co + co + 2 * co

    def conv(k, ci, co):
        return k * k * ci * co + co

    total = unit(3, c, w1) + unit(3, w1, w2) + unit(3, w2, w3)
    if config.multipath:
        total += sum(unit(k, w3, m) + unit(k, m, m) for k in MULTIPATH_KERNELS)
    else:
        total += unit(3, w3, m)
    total += unit(3, m, w3) + unit(3, w3, w3)
    total += conv(1, w3, w3) + unit(3, w3, w2)
    total += conv(2, w2, w2) + conv(1, w2, w2) + unit(3, w2, w1)
    total += conv(2, w1, w1) + conv(1, w1, w1) + unit(3, w1, w1)
    total += conv(1, w1, nc)
    if config.bidirectional:
        total += conv(1, w1, c) + conv(1, w1, w1) + conv(1, w2, w2)
    return total


def parameter_table(model: Model) -> list[tuple[str, int]]:
    """Per-layer parameter counts in build order."""
    rows: dict[str, int] = {}
    for name, p in model.params.items():
        layer = name.split(".")[0]
        rows[layer] = rows.get(layer, 0) + p.size
    return list(rows.items())


def search_stage_widths(
    start=DEFAULT_STAGE_WIDTHS,
    start_multipath=DEFAULT_MULTIPATH_WIDTH,
    target=PARAM_BUDGET,
    tolerance=0.03,
    **config_kwargs,
):
    """Scale widths monotonically from ``start`` until the count is within budget.

    Widths are scaled by a common factor ``s`` (each rounded to the nearest
    integer, at least 1), with ``s`` stepped by 1% towards the target. Returns
    ``(stage_widths, multipath_width, count)``.
    """

    def count_at(s):
        widths = tuple(max(1, round(w * s)) for w in start)
        mw = max(1, round(start_multipath * s))
        return widths, mw, analytic_parameter_count(
            NetworkConfig(stage_widths=widths, multipath_width=mw, **config_kwargs)
        )

    lo, hi = target * (1 - tolerance), target * (1 + tolerance)
    s = 1.0
    widths, mw, n = count_at(s)
    step = 0.01 if n < lo else -0.01
    for _ in range(500):
        if lo <= n <= hi:
            return widths, mw, n
        s += step
        widths, mw, n = count_at(s)
    raise RuntimeError("no width scaling lands inside the parameter budget")


# -- building blocks -----------------------------------------------------------


@dataclass
class ConvUnit:
    """conv -> ReLU -> BN, the repeated unit of the network."""

    name: str
    conv: ConvParams
    bn: BatchNormState


def _acc(grads: dict, key: str, g: np.ndarray) -> None:
    if key in grads:
        grads[key] = grads[key] + g
    else:
        grads[key] = g


def conv_unit(x, unit: ConvUnit, training: bool):
    z = conv2d(x, unit.conv)
    y, bn_cache = batchnorm2d(relu(z), unit.bn, training)
    return y, (x, z, bn_cache)


def conv_unit_backward(unit: ConvUnit, cache, dy, grads: dict):
    x, z, bn_cache = cache
    da, dgamma, dbeta = batchnorm2d_backward(bn_cache, dy)
    dx, dw, db = conv2d_backward(x, unit.conv, relu_backward(z, da))
    _acc(grads, f"{unit.name}.weight", dw)
    _acc(grads, f"{unit.name}.bias", db)
    _acc(grads, f"{unit.name}.bn.gamma", dgamma)
    _acc(grads, f"{unit.name}.bn.beta", dbeta)
    return dx


def _plain_conv_backward(name, params, x, dy, grads):
    dx, dw, db = conv2d_backward(x, params, dy)
    _acc(grads, f"{name}.weight", dw)
    _acc(grads, f"{name}.bias", db)
    return dx


def multipath_stage(x, branches, training: bool):
    """Sum of BN(ReLU(conv_nxn(x))) over the 1x1, 3x3 and 5x5 branches."""
    if len(branches) != len(MULTIPATH_KERNELS):
        raise ValueError("multipath_stage needs exactly three branches")
    out, caches = None, []
    for unit in branches:
        y, c = conv_unit(x, unit, training)
        if out is not None and y.shape != out.shape:
            raise ValueError(f"branch {unit.name} produced {y.shape}, expected {out.shape}")
        out = y if out is None else add(out, y)
        caches.append(c)
    return out, caches


def multipath_stage_backward(branches, caches, dy, grads):
    dx = None
    for unit, c in zip(branches, caches):
        g = conv_unit_backward(unit, c, dy, grads)
        dx = g if dx is None else dx + g
    return dx


def multipath_block(x, stage1, stage2, training: bool):
    """Two cascaded multipath stages; the second consumes the first's output."""
    s1, c1 = multipath_stage(x, stage1, training)
    out, c2 = multipath_stage(s1, stage2, training)
    return out, (c1, c2)


def multipath_block_backward(stage1, stage2, cache, dy, grads):
    c1, c2 = cache
    ds1 = multipath_stage_backward(stage2, c2, dy, grads)
    return multipath_stage_backward(stage1, c1, ds1, grads)


def encoder_block(x, unit: ConvUnit, stage_index: int, training: bool):
    """Return ``(features, downsampled, cache)``; stages 1 and 2 pool, stage 3 does not."""
    if stage_index not in (1, 2, 3):
        raise ValueError("stage_index must be 1, 2 or 3")
    feats, uc = conv_unit(x, unit, training)
    if stage_index == 3:
        return feats, feats, (uc, None)
    down, idx = maxpool2(feats)
    return feats, down, (uc, idx)


def encoder_block_backward(unit, cache, d_features, d_down, grads):
    uc, idx = cache
    d = d_features
    if d_down is not None:
        extra = d_down if idx is None else maxpool2_backward(idx, d_down)
        d = extra if d is None else d + extra
    return conv_unit_backward(unit, uc, d, grads)


def decoder_block(x, forward_skip, unit: ConvUnit, skip_name: str, skip: ConvParams,
                  up_name: str | None, up: ConvParams | None, training: bool):
    """BN(ReLU(conv3(upsample(x) + project(forward_skip))))."""
    u = conv_transpose2d(x, up) if up is not None else x
    if u.shape[2:] != forward_skip.shape[2:]:
        raise ValueError(f"decoder: upsampled size {u.shape[2:]} != skip size {forward_skip.shape[2:]}")
    fused = add(u, conv2d(forward_skip, skip))
    y, uc = conv_unit(fused, unit, training)
    return y, (x, forward_skip, skip_name, skip, up_name, up, uc)


def decoder_block_backward(unit, cache, dy, grads):
    """Return ``(dx, d_forward_skip)``."""
    x, forward_skip, skip_name, skip, up_name, up, uc = cache
    dfused = conv_unit_backward(unit, uc, dy, grads)
    dskip = _plain_conv_backward(skip_name, skip, forward_skip, dfused, grads)
    if up is None:
        return dfused, dskip
    dx, dw, db = conv_transpose2d_backward(x, up, dfused)
    _acc(grads, f"{up_name}.weight", dw)
    _acc(grads, f"{up_name}.bias", db)
    return dx, dskip


# -- whole network ---------------------------------------------------------------


@dataclass
class ActivationCache:
    """Per-pass block caches written by :func:`forward`, read once by :func:`backward`."""

    token: int
    training: bool
    models: list
    entries: dict = field(default_factory=dict)
    prob: np.ndarray | None = None
    consumed: bool = False

    @property
    def pass_count(self) -> int:
        return len(self.models)


def _branches(model: Model, stage: str, p: int):
    return [model.unit(f"{stage}.b{k}", p) for k in MULTIPATH_KERNELS]


def _run_pass(model: Model, x, prev_dec, training, p, cache: ActivationCache, final: bool):
    e = cache.entries

    def rev_in(base, i):
        if prev_dec is None:
            return base
        e[(f"rev{i}", p)] = prev_dec[i - 1]
        return add(base, conv2d(prev_dec[i - 1], model.conv(f"rev{i}")))

    f1, d1, e[("enc1", p)] = encoder_block(rev_in(x, 1), model.unit("enc1", p), 1, training)
    f2, d2, e[("enc2", p)] = encoder_block(rev_in(d1, 2), model.unit("enc2", p), 2, training)
    f3, _, e[("enc3", p)] = encoder_block(rev_in(d2, 3), model.unit("enc3", p), 3, training)
    if model.config.multipath:
        m, e[("mp", p)] = multipath_block(f3, _branches(model, "mp1", p), _branches(model, "mp2", p), training)
    else:
        m, e[("mp", p)] = conv_unit(f3, model.unit("mp", p), training)
    b1, e[("bott1", p)] = conv_unit(m, model.unit("bott1", p), training)
    b2, e[("bott2", p)] = conv_unit(b1, model.unit("bott2", p), training)
    g3, e[("dec3", p)] = decoder_block(b2, f3, model.unit("dec3", p), "skip3", model.conv("skip3"), None, None, training)
    g2, e[("dec2", p)] = decoder_block(g3, f2, model.unit("dec2", p), "skip2", model.conv("skip2"), "up2", model.conv("up2"), training)
    g1, e[("dec1", p)] = decoder_block(g2, f1, model.unit("dec1", p), "skip1", model.conv("skip1"), "up1", model.conv("up1"), training)
    logits = None
    if final:
        e[("head", p)] = g1
        logits = conv2d(g1, model.conv("head"))
    return logits, (g1, g2, g3)


def _backward_pass(model: Model, cache: ActivationCache, p, d_logits, d_dec, grads):
    e = cache.entries
    dg1 = d_dec.get(1)
    if d_logits is not None:
        dh = _plain_conv_backward("head", model.conv("head"), e[("head", p)], d_logits, grads)
        dg1 = dh if dg1 is None else dg1 + dh

    def plus(a, b):
        return b if a is None else (a if b is None else a + b)

    dg2, df1 = decoder_block_backward(model.unit("dec1", p), e[("dec1", p)], dg1, grads)
    dg2 = plus(dg2, d_dec.get(2))
    dg3, df2 = decoder_block_backward(model.unit("dec2", p), e[("dec2", p)], dg2, grads)
    dg3 = plus(dg3, d_dec.get(3))
    db2, df3 = decoder_block_backward(model.unit("dec3", p), e[("dec3", p)], dg3, grads)
    db1 = conv_unit_backward(model.unit("bott2", p), e[("bott2", p)], db2, grads)
    dm = conv_unit_backward(model.unit("bott1", p), e[("bott1", p)], db1, grads)
    if model.config.multipath:
        dm = multipath_block_backward(_branches(model, "mp1", p), _branches(model, "mp2", p), e[("mp", p)], dm, grads)
    else:
        dm = conv_unit_backward(model.unit("mp", p), e[("mp", p)], dm, grads)

    d_prev = {}

    def rev_out(d_in, i):
        key = (f"rev{i}", p)
        if key in e:
            d_prev[i] = _plain_conv_backward(f"rev{i}", model.conv(f"rev{i}"), e[key], d_in, grads)
        return d_in

    dd2 = rev_out(encoder_block_backward(model.unit("enc3", p), e[("enc3", p)], plus(dm, df3), None, grads), 3)
    dd1 = rev_out(encoder_block_backward(model.unit("enc2", p), e[("enc2", p)], df2, dd2, grads), 2)
    dx = rev_out(encoder_block_backward(model.unit("enc1", p), e[("enc1", p)], df1, dd1, grads), 1)
    return dx, d_prev


def _check_input(model: Model, image: np.ndarray) -> None:
    if image.ndim != 4 or image.shape[1] != model.config.input_channels:
        raise ValueError(f"expected (N, {model.config.input_channels}, H, W) input, got {image.shape}")
    if image.shape[2] % 4 or image.shape[3] % 4:
        raise ValueError(f"spatial dims must be divisible by 4, got {image.shape[2:]}")


def forward_passes(models, image, training=False, return_cache=False):
    """Run one pass per entry of ``models``; pass ``i`` uses ``models[i]``'s weights.

    :func:`forward` calls this with the same model repeated. Distinct models
    let tests freeze one pass while perturbing the other.
    """
    for m in models:
        _check_input(m, image)
    cache = ActivationCache(token=next(_tokens), training=training, models=list(models))
    prev = None
    for p, m in enumerate(models):
        logits, prev = _run_pass(m, image, prev, training, p, cache, final=p == len(models) - 1)
    prob = softmax_channels(logits)
    cache.prob = prob
    for m in models:
        m._last_token = cache.token
    if return_cache:
        return prob, cache
    return prob


def forward(model: Model, image: np.ndarray, pass_count: int | None = None,
            training: bool = False, return_cache: bool = False):
    """Class probabilities ``(N, num_classes, H, W)`` for ``image``.

    ``pass_count`` defaults to the config's; 2 requires the reverse-skip
    projections, i.e. a model built with ``pass_count=2``.
    """
    pass_count = model.config.pass_count if pass_count is None else pass_count
    if pass_count not in (1, 2):
        raise ValueError("pass_count must be 1 or 2")
    if pass_count == 2 and "rev1.weight" not in model.params:
        raise ValueError("this model has no reverse-skip projections; use pass_count=1")
    return forward_passes([model] * pass_count, image, training, return_cache)


def backward(model: Model, cache: ActivationCache, d_prob: np.ndarray,
             per_pass: bool = False, return_input_grad: bool = False):
    """Gradients of the loss w.r.t. every trainable parameter.

    Parameters shared across passes accumulate both passes' contributions;
    with ``per_pass=True`` a list of one dict per pass is returned instead.
    Parameters not touched by the forward (e.g. reverse projections after a
    one-pass forward) get zero gradients.
    """
    if cache.consumed:
        raise ValueError("activation cache already consumed by a backward pass")
    if not any(m is model for m in cache.models) or any(m._last_token != cache.token for m in cache.models):
        raise ValueError("stale activation cache: not produced by this model's latest forward")
    if d_prob.shape != cache.prob.shape:
        raise ValueError("upstream gradient shape differs from the probability map")
    cache.consumed = True
    d_logits = softmax_channels_backward(cache.prob, d_prob)
    per = []
    d_dec: dict = {}
    dx = None
    for p in reversed(range(cache.pass_count)):
        g: dict = {}
        m = cache.models[p]
        dxp, d_dec = _backward_pass(m, cache, p, d_logits if p == cache.pass_count - 1 else None, d_dec, g)
        dx = dxp if dx is None else dx + dxp
        per.append(g)
    per.reverse()
    cache.entries.clear()

    def complete(g):
        return {k: g.get(k, np.zeros_like(v)) for k, v in model.params.items()}

    if per_pass:
        result = [complete(g) for g in per]
    else:
        total: dict = {}
        for g in per:
            for k, v in g.items():
                _acc(total, k, v)
        result = complete(total)
    if return_input_grad:
        return result, dx
    return result


def zero_reverse_projections(model: Model) -> None:
    for i in (1, 2, 3):
        for suffix in ("weight", "bias"):
            key = f"rev{i}.{suffix}"
            if key in model.params:
                model.params[key][...] = 0

