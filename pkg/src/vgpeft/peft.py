"""LoRA, adapter and BitFit injection with module-placement policies.

``inject`` mutates a model in place: it freezes every original parameter,
then adds (LoRA, adapters) or unfreezes (BitFit) a small trainable set inside
the modules named by the placement. Right after injection the adapted model
computes exactly the same function as the base model.
"""

import copy
import enum
import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import SpecError, StateError
from .model import ALL_TAGS, ModuleTag, tag_of
from .nn import EncoderBlock, DecoderBlock, Linear, Module, gaussian
from .tensor import Parameter


class Method(str, enum.Enum):
    LORA = "lora"
    ADAPTER = "adapter"
    BITFIT = "bitfit"


@dataclass(frozen=True)
class PeftSpec:
    method: Method
    placement: frozenset = ALL_TAGS
    rank: int = 16
    alpha: float = 1.0
    bottleneck: int = None  # adapter width; defaults to d_model // 4
    layer_kinds: frozenset = field(default=frozenset({"dense"}))

    def __post_init__(self):
        try:
            object.__setattr__(self, "method", Method(self.method))
        except ValueError:
            raise SpecError(f"unknown PEFT method {self.method!r}") from None
        try:
            placement = frozenset(t if isinstance(t, ModuleTag) else ModuleTag.parse(t)
                                  for t in self.placement)
        except ValueError as e:
            raise SpecError(str(e)) from None
        if not placement:
            raise SpecError("placement must name at least one module")
        object.__setattr__(self, "placement", placement)
        object.__setattr__(self, "layer_kinds", frozenset(self.layer_kinds))
        if self.layer_kinds != {"dense"}:
            raise SpecError(f"only dense layers are supported, got {sorted(self.layer_kinds)}")
        if self.method is Method.LORA:
            if int(self.rank) != self.rank or self.rank < 1:
                raise SpecError(f"LoRA rank must be a positive integer, got {self.rank}")
            if not self.alpha > 0:
                raise SpecError(f"LoRA scale must be positive, got {self.alpha}")
        if self.method is Method.ADAPTER and self.bottleneck is not None:
            if int(self.bottleneck) != self.bottleneck or self.bottleneck < 1:
                raise SpecError(f"adapter bottleneck must be a positive integer, got {self.bottleneck}")

    @classmethod
    def lora(cls, rank=16, alpha=1.0, placement=ALL_TAGS):
        return cls(Method.LORA, frozenset(placement), rank=rank, alpha=alpha)

    @classmethod
    def adapter(cls, bottleneck=None, placement=ALL_TAGS):
        return cls(Method.ADAPTER, frozenset(placement), bottleneck=bottleneck)

    @classmethod
    def bitfit(cls, placement=ALL_TAGS):
        return cls(Method.BITFIT, frozenset(placement))

    def placement_names(self):
        order = list(ModuleTag)
        return [t.value for t in sorted(self.placement, key=order.index)]

    def to_dict(self):
        d = {"method": self.method.value, "placement": self.placement_names()}
        if self.method is Method.LORA:
            d.update(rank=int(self.rank), alpha=float(self.alpha))
        elif self.method is Method.ADAPTER:
            d["bottleneck"] = self.bottleneck
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        return cls(Method(d.pop("method")), frozenset(d.pop("placement")), **d)


class LoraLinear(Module):
    """Frozen dense layer plus a trainable low-rank update.

    ``y = x W^T + b + scale * x B^T A^T``, i.e. the effective weight is
    ``W + scale * A @ B`` with A (d_out x r) and B (r x d_in). B starts at
    zero so the update is exactly zero at injection.
    """

    def __init__(self, base, rank, scale, rng):
        self.weight = base.weight
        self.bias = base.bias
        self.lora_A = Parameter(gaussian(rng, (base.d_out, rank), 1.0 / np.sqrt(rank)))
        self.lora_B = Parameter(np.zeros((rank, base.d_in)))
        self.scale = float(scale)

    @property
    def d_in(self):
        return self.weight.shape[1]

    @property
    def d_out(self):
        return self.weight.shape[0]

    def delta(self):
        return self.scale * (self.lora_A.data @ self.lora_B.data)

    def forward(self, x):
        base = T.bias_add(T.matmul(x, T.transpose(self.weight)), self.bias)
        low = T.matmul(T.matmul(x, T.transpose(self.lora_B)), T.transpose(self.lora_A))
        return base + low * self.scale


class Adapter(Module):
    """Bottleneck adapter with residual: ``h + up(gelu(down(h)))``; identity at init."""

    def __init__(self, d, bottleneck, rng):
        self.down = Linear(d, bottleneck, rng)
        self.up = Linear(bottleneck, d, rng)
        self.up.weight.data[...] = 0.0

    def forward(self, h):
        return h + self.up(T.gelu(self.down(h)))


# ---------------------------------------------------------------------------
# injection


def _module_tag(path):
    return tag_of(path) if path else None


def _dense_sites(model):
    """Yield (path, parent, attr, Linear) for every plain dense layer in the model."""
    for path, module in list(model.named_modules()):
        for name, child in list(module.children()):
            if type(child) is Linear:
                yield (f"{path}.{name}" if path else name), module, name, child


def _blocks(model):
    for path, module in model.named_modules():
        if isinstance(module, (EncoderBlock, DecoderBlock)):
            yield path, module


def model_checksum(model, paths=None):
    """SHA-256 over (path, shape, little-endian float64 bytes) of the chosen parameters."""
    h = hashlib.sha256()
    for path, p in model.named_parameters():
        if paths is not None and path not in paths:
            continue
        h.update(path.encode())
        h.update(repr(tuple(p.shape)).encode())
        h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return h.hexdigest()


def bias_paths(model, placement=ALL_TAGS):
    """Paths of every bias-kind parameter inside the placement, by direct scan."""
    return [path for path, p in model.named_parameters()
            if p.kind == Parameter.BIAS and tag_of(path) in placement]


def inject(model, spec):
    """Adapt ``model`` in place according to ``spec`` and return it."""
    if not isinstance(spec, PeftSpec):
        raise SpecError(f"expected a PeftSpec, got {type(spec).__name__}")
    if model.peft is not None:
        raise StateError("model already carries PEFT structure; inject once per base model")
    base_checksum = model_checksum(model)
    for p in model.parameters():
        p.trainable = False
    # a private stream so injection never disturbs the base initialisation
    rng = np.random.default_rng([model.config.seed, 0x10AA])

    if spec.method is Method.LORA:
        for path, parent, name, lin in list(_dense_sites(model)):
            if tag_of(path) in spec.placement:
                setattr(parent, name, LoraLinear(lin, spec.rank, spec.alpha, rng))
    elif spec.method is Method.ADAPTER:
        width = spec.bottleneck or max(1, model.config.d_model // 4)
        for path, block in list(_blocks(model)):
            if tag_of(path) not in spec.placement:
                continue
            for sub in block.SUBLAYERS:
                setattr(block, f"{sub}_adapter", Adapter(model.config.d_model, width, rng))
    else:
        params = model.params
        for path in bias_paths(model, spec.placement):
            params[path].trainable = True

    model.peft = {"spec": spec, "base_checksum": base_checksum}
    model.refresh_paths()
    return model


def peft_paths(model):
    """Paths of parameters introduced by injection (LoRA factors, adapters)."""
    paths = []
    for path, module in model.named_modules():
        if isinstance(module, LoraLinear):
            paths += [f"{path}.lora_A", f"{path}.lora_B"]
        elif isinstance(module, Adapter):
            paths += [p for p, _ in module.named_parameters(path)]
    return paths


def merge_lora(model):
    """Fold every LoRA update into its dense weight, leaving a plain model.

    The merged model has no PEFT structure and all parameters trainable,
    like a freshly built one.
    """
    if model.peft is None or model.peft["spec"].method is not Method.LORA:
        raise StateError("merge_lora needs a LoRA-adapted model")
    for path, module in list(model.named_modules()):
        for name, child in list(module.children()):
            if isinstance(child, LoraLinear):
                lin = Linear.__new__(Linear)
                lin.weight = Parameter(child.weight.data + child.delta())
                lin.bias = Parameter(child.bias.data.copy(), kind=Parameter.BIAS)
                setattr(module, name, lin)
    model.peft = None
    for p in model.parameters():
        p.trainable = True
    model.refresh_paths()
    return model


# ---------------------------------------------------------------------------
# reporting


def efficiency(trainable, total):
    """Percentage of parameters left frozen: ``100 - trainable / total * 100``."""
    if total <= 0:
        raise ValueError("total parameter count must be positive")
    if not 0 <= trainable <= total:
        raise ValueError(f"trainable count {trainable} outside [0, {total}]")
    return 100.0 - (trainable / total * 100.0)


@dataclass(frozen=True)
class ParamReport:
    total: int
    trainable: int
    per_tag: dict  # tag value -> {"total": n, "trainable": n}
    placement: tuple = ()
    method: str = ""

    @property
    def efficiency(self):
        return efficiency(self.trainable, self.total)

    @classmethod
    def from_counts(cls, trainable, total, **kw):
        return cls(total=int(total), trainable=int(trainable), per_tag=kw.pop("per_tag", {}), **kw)

    def efficiency_str(self):
        return f"{self.efficiency:.2f}"

    def to_dict(self):
        return {
            "method": self.method,
            "placement": list(self.placement),
            "total": self.total,
            "trainable": self.trainable,
            "efficiency": self.efficiency,
            "per_tag": self.per_tag,
        }

    def render(self):
        lines = [
            f"method      {self.method or '-'}",
            f"placement   {', '.join(self.placement) or '-'}",
            f"total       {self.total:,}",
            f"trainable   {self.trainable:,}",
            f"efficiency  {self.efficiency_str()}",
        ]
        for tag, c in self.per_tag.items():
            lines.append(f"  {tag:<8} trainable {c['trainable']:>7,} / {c['total']:>7,}")
        return "\n".join(lines) + "\n"


def param_report(model):
    """Count parameter elements overall, per module tag, and trainable ones."""
    per_tag = {t.value: {"total": 0, "trainable": 0} for t in ModuleTag}
    for path, p in model.named_parameters():
        c = per_tag[tag_of(path).value]
        c["total"] += p.size
        if p.trainable:
            c["trainable"] += p.size
    total = sum(c["total"] for c in per_tag.values())
    trainable = sum(c["trainable"] for c in per_tag.values())
    if model.peft is not None:
        spec = model.peft["spec"]
        method, placement = spec.method.value, tuple(spec.placement_names())
    else:
        method = "fft" if trainable == total else "none"
        placement = tuple(t.value for t in ModuleTag) if trainable == total else ()
    return ParamReport(total=total, trainable=trainable, per_tag=per_tag,
                       placement=placement, method=method)


def placement_sweep(model, spec, placements):
    """One ParamReport per placement, each on a fresh deep copy of ``model``."""
    reports = []
    for placement in placements:
        variant = PeftSpec(spec.method, frozenset(placement), rank=spec.rank,
                           alpha=spec.alpha, bottleneck=spec.bottleneck)
        reports.append(param_report(inject(copy.deepcopy(model), variant)))
    return reports


def placement_label(placement):
    """Human-readable row label for a placement, e.g. "Image Encoder + Decoder"."""
    tags = frozenset(placement)
    if tags == ALL_TAGS:
        return "Encoders + Decoder"
    order = [ModuleTag.TEXT_ENCODER, ModuleTag.IMAGE_ENCODER, ModuleTag.DECODER]
    return " + ".join(t.label for t in order if t in tags)


def render_sweep(reports):
    rows = [(placement_label(r.placement), r.efficiency_str(), f"{r.trainable:,}") for r in reports]
    w = max([len("Methods")] + [len(r[0]) for r in rows])
    out = [f"{'Methods':<{w}} | Efficiency | Trainable", "-" * (w + 25)]
    out += [f"{name:<{w}} | {eff:>10} | {n:>9}" for name, eff, n in rows]
    return "\n".join(out) + "\n"
