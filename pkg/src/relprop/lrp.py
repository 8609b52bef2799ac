"""Relevance propagation rules and backward relevance passes.

The backward pass redistributes the score of one output unit through the
network, layer by layer, producing a relevance tensor at every layer
boundary. For a weighted layer the redistribution is the ratio form

    R_j = sum_k (a_j * rho(w_jk)) / (eps + sum_0,j a_j * rho(w_jk)) * R_k

computed in four steps: a forward pass through the rho-transformed layer
(the bias, also rho-transformed, joins the denominator but never receives a
share), an elementwise division, a transposed forward pass (the exact
adjoint), and an elementwise product with the input activations.

Rules differ only in ``rho`` and ``eps``:

- ``lrp0``      rho(w) = w, eps = 0
- ``epsilon``   rho(w) = w, eps > 0 added to the denominator as-is
- ``gamma``     rho(w) = w + gamma * max(w, 0); with ``positive_only`` set,
                rho(w) = max(w, 0) (the fully rectified variant)
- ``zb``        pixel-layer rule with box constraints [low, high]; see
                :func:`lrp_zb_input`

Zero denominators: when a denominator magnitude falls below 1e-12 and the
relevance waiting to flow through it is non-negligible (> 1e-9) and the rule
has no epsilon stabilizer, :class:`DivisionGuardError` is raised — silently
dropping that relevance would hide a misconfiguration. Otherwise the ratio
is set to zero and the occurrence is counted in the diagnostics.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DivisionGuardError, RuleError, ShapeError
from .network import ForwardTrace, LayerSpec, Network
from .tensor import DTYPE, conv2d, conv_transpose2d, linear, max_unpool2d

GUARD_TINY = 1e-12
GUARD_SIGNIFICANT = 1e-9

RULE_KINDS = ("lrp0", "epsilon", "gamma", "zb")


@dataclass(frozen=True)
class Rule:
    kind: str
    eps: float = 0.0
    gamma: float = 0.0
    positive_only: bool = False

    def __post_init__(self):
        if self.kind not in RULE_KINDS:
            raise RuleError(f"unknown rule kind {self.kind!r}")
        if self.eps < 0:
            raise RuleError("eps must be >= 0")
        if self.gamma < 0:
            raise RuleError("gamma must be >= 0")

    def describe(self) -> str:
        if self.kind == "epsilon":
            return f"epsilon:{self.eps:g}"
        if self.kind == "gamma":
            name = "gamma+" if self.positive_only else "gamma"
            return f"{name}:{self.gamma:g}"
        return self.kind


LRP0 = Rule("lrp0")


def epsilon_rule(eps: float = 1e-6) -> Rule:
    if eps <= 0:
        raise RuleError("epsilon rule needs eps > 0")
    return Rule("epsilon", eps=eps)


def gamma_rule(gamma: float = 0.25, positive_only: bool = False) -> Rule:
    return Rule("gamma", gamma=gamma, positive_only=positive_only)


def zb_rule() -> Rule:
    return Rule("zb")


def rho(weight: np.ndarray, rule: Rule) -> np.ndarray:
    """Apply a rule's weight transform."""
    if rule.kind == "gamma":
        if rule.positive_only:
            return np.maximum(weight, DTYPE(0))
        return (weight + DTYPE(rule.gamma) * np.maximum(weight, DTYPE(0))).astype(
            DTYPE
        )
    return weight


@dataclass(frozen=True)
class PixelBounds:
    """Box constraints for the input domain, shaped like the input tensor."""

    low: np.ndarray
    high: np.ndarray

    def __post_init__(self):
        if self.low.shape != self.high.shape:
            raise ShapeError("pixel bounds must share one shape")
        if np.any(self.low > self.high):
            raise ShapeError("pixel bounds need low <= high everywhere")

    @classmethod
    def from_normalization(cls, normalization, input_shape) -> "PixelBounds":
        """Bounds of a [0,1] pixel box after per-channel normalization."""
        c = input_shape[0]
        if normalization is None:
            mean, std = (0.0,) * c, (1.0,) * c
        else:
            mean, std = normalization
        low = np.zeros(input_shape, dtype=DTYPE)
        high = np.zeros(input_shape, dtype=DTYPE)
        for ch in range(c):
            low[ch] = (0.0 - mean[ch]) / std[ch]
            high[ch] = (1.0 - mean[ch]) / std[ch]
        return cls(low=low, high=high)


# ---------------------------------------------------------------------------
# Rule assignments


@dataclass(frozen=True)
class RuleAssignment:
    """Maps every layer index to a rule via inclusive ranges."""

    entries: tuple[tuple[int, int, Rule], ...]

    @classmethod
    def uniform(cls, n_layers: int, rule: Rule) -> "RuleAssignment":
        return cls(((0, n_layers - 1, rule),))

    def rule_for(self, index: int) -> Rule:
        for lo, hi, rule in self.entries:
            if lo <= index <= hi:
                return rule
        raise RuleError(f"no rule assigned to layer {index}")

    def validate(self, net: Network) -> None:
        """Every layer covered exactly once; zb only on the first layer."""
        n = len(net.layers)
        seen = [0] * n
        for lo, hi, rule in self.entries:
            if lo > hi or lo < 0 or hi >= n:
                raise RuleError(f"rule range [{lo}, {hi}] invalid for {n} layers")
            for i in range(lo, hi + 1):
                seen[i] += 1
        bad = [i for i, c in enumerate(seen) if c != 1]
        if bad:
            raise RuleError(
                f"layers covered != exactly once: {bad[:8]}"
            )
        for i, layer in enumerate(net.layers):
            if layer.kind in ("conv", "linear") and self.rule_for(i).kind == "zb":
                if layer.kind != "conv" or i != 0:
                    raise RuleError(
                        "the zb rule applies only to an input-adjacent convolution"
                    )

    def uses_zb(self) -> bool:
        return any(rule.kind == "zb" for _, _, rule in self.entries)

    def describe(self) -> str:
        return ";".join(f"{lo}-{hi}={rule.describe()}" for lo, hi, rule in self.entries)


def default_rules(net: Network, eps: float = 1e-6) -> RuleAssignment:
    """Epsilon everywhere, plain lrp0 on the final layer."""
    n = len(net.layers)
    if n == 1:
        return RuleAssignment(((0, 0, LRP0),))
    return RuleAssignment(((0, n - 2, epsilon_rule(eps)), (n - 1, n - 1, LRP0)))


def _rule_from_name(name: str, arg: float | None) -> Rule:
    if name == "lrp0":
        return LRP0
    if name == "epsilon":
        return epsilon_rule(1e-6 if arg is None else arg)
    if name == "gamma":
        return gamma_rule(0.25 if arg is None else arg)
    if name == "gamma+":
        return gamma_rule(0.25 if arg is None else arg, positive_only=True)
    if name == "zb":
        return zb_rule()
    raise RuleError(f"unknown rule name {name!r}")


def rules_from_doc(doc) -> RuleAssignment:
    """Parse the ``rules`` section of an architecture document."""
    entries = []
    for item in doc:
        lo, hi = (int(v) for v in item["layers"])
        name = item["rule"]
        arg = item.get("gamma", item.get("eps"))
        rule = _rule_from_name(name, None if arg is None else float(arg))
        if name == "gamma" and item.get("positive_only"):
            rule = gamma_rule(rule.gamma, positive_only=True)
        entries.append((lo, hi, rule))
    return RuleAssignment(tuple(entries))


def parse_rules(text: str) -> RuleAssignment:
    """Parse the compact CLI grammar, e.g. ``0=zb;1-16=gamma:0.25;17-36=epsilon``.

    Each ``;``-separated entry is ``INDEX=RULE`` or ``LO-HI=RULE`` where RULE
    is ``lrp0``, ``epsilon[:eps]``, ``gamma[:g]``, ``gamma+[:g]`` or ``zb``.
    """
    entries = []
    for chunk in text.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        try:
            span, rule_text = chunk.split("=", 1)
            lo, hi = (
                (int(v) for v in span.split("-", 1)) if "-" in span
                else (int(span), int(span))
            )
            if ":" in rule_text:
                name, arg_text = rule_text.split(":", 1)
                rule = _rule_from_name(name.strip(), float(arg_text))
            else:
                rule = _rule_from_name(rule_text.strip(), None)
        except (ValueError, RuleError) as exc:
            raise RuleError(f"bad rule entry {chunk!r}: {exc}") from exc
        entries.append((lo, hi, rule))
    if not entries:
        raise RuleError("empty rule assignment")
    return RuleAssignment(tuple(entries))


# ---------------------------------------------------------------------------
# Propagation steps


def _guarded_divide(r_above, z, *, can_raise, where, stats):
    """Elementwise r/z with the zero-denominator policy applied."""
    tiny = np.abs(z) < GUARD_TINY
    if not tiny.any():
        return (r_above / z).astype(DTYPE)
    significant = np.abs(r_above) > GUARD_SIGNIFICANT
    if can_raise and bool(np.any(tiny & significant)):
        count = int(np.count_nonzero(tiny & significant))
        raise DivisionGuardError(
            f"{where}: zero denominator under {count} unit(s) carrying relevance; "
            "use an epsilon-stabilized rule or fix the rule assignment"
        )
    dropped = int(np.count_nonzero(tiny & (r_above != 0)))
    if stats is not None and dropped:
        stats["dropped"] = stats.get("dropped", 0) + dropped
    safe = np.where(tiny, DTYPE(1), z)
    s = r_above / safe
    return np.where(tiny, DTYPE(0), s).astype(DTYPE)


def init_output_relevance(scores, class_index: int) -> np.ndarray:
    """All-zero vector except the chosen class, which keeps its score."""
    scores = np.asarray(scores, dtype=DTYPE)
    if scores.ndim != 1:
        raise ShapeError("scores must be a vector")
    if not 0 <= class_index < scores.size:
        raise IndexError(
            f"class {class_index} out of range for {scores.size} outputs"
        )
    out = np.zeros_like(scores)
    out[class_index] = scores[class_index]
    return out


def lrp_step(
    layer: LayerSpec, params, a, r_above, rule: Rule, stats=None, where="layer"
) -> np.ndarray:
    """One ratio-form redistribution through a conv or linear layer."""
    if rule.kind == "zb":
        raise RuleError("the zb rule is applied with lrp_zb_input")
    if layer.kind not in ("conv", "linear"):
        raise RuleError(f"lrp_step handles weighted layers, not {layer.kind!r}")
    weight = params[layer.weight_name]
    bias = params[layer.bias_name] if layer.bias else None
    rw = rho(weight, rule)
    rb = rho(bias, rule) if bias is not None else None

    if layer.kind == "conv":
        z = conv2d(a, rw, rb, stride=layer.stride, padding=layer.padding)
    else:
        z = linear(a, rw, rb)
    if rule.kind == "epsilon":
        z = z + DTYPE(rule.eps)
    s = _guarded_divide(
        r_above, z, can_raise=rule.eps == 0, where=where, stats=stats
    )
    if layer.kind == "conv":
        c = conv_transpose2d(s, rw, stride=layer.stride, padding=layer.padding)
    else:
        c = rw.T @ s
    return (a * c).astype(DTYPE)


def lrp_zb_input(
    layer: LayerSpec, params, x, r_above, bounds: PixelBounds, stats=None
) -> np.ndarray:
    """Pixel-layer redistribution under box constraints.

    z_k = sum_i x_i w_ik - low_i w+_ik - high_i w-_ik  (no bias term), and
    each input's share uses the same three-term numerator. Conservation is
    exact by construction; zero denominators fall back to zero shares.
    """
    if layer.kind != "conv":
        raise RuleError("the zb rule applies to a convolution layer")
    if bounds is None:
        raise RuleError("the zb rule needs pixel bounds")
    weight = params[layer.weight_name]
    if bounds.low.shape != x.shape:
        raise ShapeError(
            f"bounds shape {bounds.low.shape} does not match input {x.shape}"
        )
    w_pos = np.maximum(weight, DTYPE(0))
    w_neg = np.minimum(weight, DTYPE(0))
    stride, padding = layer.stride, layer.padding
    z = (
        conv2d(x, weight, stride=stride, padding=padding)
        - conv2d(bounds.low, w_pos, stride=stride, padding=padding)
        - conv2d(bounds.high, w_neg, stride=stride, padding=padding)
    )
    s = _guarded_divide(r_above, z, can_raise=False, where="zb input", stats=stats)
    return (
        x * conv_transpose2d(s, weight, stride=stride, padding=padding)
        - bounds.low * conv_transpose2d(s, w_pos, stride=stride, padding=padding)
        - bounds.high * conv_transpose2d(s, w_neg, stride=stride, padding=padding)
    ).astype(DTYPE)


# ---------------------------------------------------------------------------
# Full backward pass


@dataclass
class RelevanceMap:
    """Relevance at every layer boundary for one (input, class) pair.

    ``relevances[i]`` is the relevance entering layer ``i``;
    ``relevances[-1]`` is the output-boundary relevance (zero everywhere
    except ``class_index``). ``dropped`` counts zero-denominator fallbacks
    per layer index.
    """

    class_index: int
    rules: RuleAssignment
    relevances: list[np.ndarray]
    dropped: dict[int, int] = field(default_factory=dict)

    @property
    def pixel(self) -> np.ndarray:
        return self.relevances[0]

    @property
    def output(self) -> np.ndarray:
        return self.relevances[-1]

    def boundary_sums(self) -> list[float]:
        return [float(r.sum()) for r in self.relevances]


def lrp_explain(
    trace: ForwardTrace,
    class_index: int,
    rules: RuleAssignment | None = None,
    bounds: PixelBounds | None = None,
) -> RelevanceMap:
    """Propagate one output unit's score down to the input boundary.

    relu layers pass relevance through unchanged; maxpool routes it to the
    recorded winners; flatten restores the spatial shape. Weighted layers
    apply their assigned rule.
    """
    net = trace.net
    n = len(net.layers)
    if rules is None:
        rules = default_rules(net)
    rules.validate(net)
    if rules.uses_zb() and bounds is None:
        bounds = PixelBounds.from_normalization(net.normalization, net.input_shape)

    r = init_output_relevance(trace.scores, class_index)
    relevances = [None] * (n + 1)
    relevances[n] = r
    dropped: dict[int, int] = {}
    for i in range(n - 1, -1, -1):
        layer = net.layers[i]
        stats: dict[str, int] = {}
        if layer.kind == "relu":
            pass
        elif layer.kind == "flatten":
            r = r.reshape(trace.inputs[i].shape)
        elif layer.kind == "maxpool":
            r = max_unpool2d(r, trace.switches[i])
        elif layer.kind in ("conv", "linear"):
            rule = rules.rule_for(i)
            if rule.kind == "zb":
                r = lrp_zb_input(
                    layer, net.params, trace.inputs[i], r, bounds, stats=stats
                )
            else:
                r = lrp_step(
                    layer,
                    net.params,
                    trace.inputs[i],
                    r,
                    rule,
                    stats=stats,
                    where=f"layer {i} ({layer.kind})",
                )
        else:
            raise RuleError(f"layer {i}: unknown kind {layer.kind!r}")
        if stats.get("dropped"):
            dropped[i] = stats["dropped"]
        relevances[i] = r
    return RelevanceMap(
        class_index=class_index,
        rules=rules,
        relevances=relevances,
        dropped=dropped,
    )
