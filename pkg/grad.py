"""
Reverse-mode differentiation on top of torch.autograd.

The primitives below are the only operations the network is built from; each
returns a torch tensor whose grad_fn is its node in the graph. `backward`
collects parameter gradients from a scalar loss and `gradcheck` compares them
against central finite differences.
"""
from dataclasses import dataclass, field
from typing import Callable, Optional

import torch
from torch.func import functional_call

from console import progress
from errors import ChannelMismatchError, GraphError
from tensor import (FilterTensor, adjoint_filter, cross_correlate, elementwise, pad_zero,
                    strided_correlate as _strided, transposed_correlate as _transposed)

INSTANCE_NORM_EPS = 1e-5
FD_STEP = 1e-5
PRIMITIVE_TOLERANCE = 1e-6
MODULE_TOLERANCE = 1e-5
MIN_COORDINATES = 50
KINK_TOLERANCE = 1e-4
KINK_REFINE = 10
KINK_PERSISTENCE = 0.3


# --- FORWARD PRIMITIVES ---

def correlate(x, v, groups=1):
    if not isinstance(v, FilterTensor):
        v = FilterTensor(v)
    return cross_correlate(x, v, "same", 1, groups)


def strided_correlate(x, weight, bias=None, stride=2):
    return _strided(x, weight, bias, stride)


def transposed_correlate(x, weight, bias=None, stride=2):
    return _transposed(x, weight, bias, stride)


def pad(x, margins):
    return pad_zero(x, margins)


def concat(tensors, rank):
    """Concatenate along the channel axis of (B, C, *spatial) or (C, *spatial) tensors."""
    return torch.cat(tensors, dim=-rank - 1)


def slice_channels(x, start, stop, rank):
    return x.narrow(x.dim() - rank - 1, start, stop - start)


def relu(x):
    return elementwise("relu", x)


def gelu(x):
    return elementwise("gelu", x)


def add(a, b):
    return elementwise("add", a, b)


def mul(a, b):
    return elementwise("mul", a, b)


def div(a, b, epsilon=None):
    return elementwise("div", a, b, epsilon=epsilon)


def instance_norm(x, weight, bias, rank, eps=INSTANCE_NORM_EPS):
    """Per-sample, per-channel normalization over the spatial axes (biased variance)."""
    axes = tuple(range(x.dim() - rank, x.dim()))
    mean = x.mean(dim=axes, keepdim=True)
    var = ((x - mean) ** 2).mean(dim=axes, keepdim=True)
    shape = (-1,) + (1,) * rank
    return (x - mean) / torch.sqrt(var + eps) * weight.reshape(shape) + bias.reshape(shape)


def pointwise_conv(x, weight, bias=None, rank=2):
    """1×1(×1) convolution; weight is (C_out, C_in)."""
    channels = x.shape[x.dim() - rank - 1]
    if channels != weight.shape[1]:
        raise ChannelMismatchError(channels, weight.shape[1])
    out = cross_correlate(x, FilterTensor(weight.reshape(*weight.shape, *([1] * rank))))
    if bias is not None:
        out = out + bias.reshape((-1,) + (1,) * rank)
    return out


def ndc_update(x, s0, raw_filter, groups=1, epsilon=1e-8, iterations=1):
    """ε-guarded multiplicative steps with V = relu(raw) shared by V and V⁻.

    Gradients reach raw_filter through both uses of V.
    """
    v = FilterTensor(relu(raw_filter))
    v_adj = adjoint_filter(v, groups)
    numerator = correlate(x, v_adj, groups)
    s = s0
    for _ in range(iterations):
        denominator = correlate(correlate(s, v, groups), v_adj, groups)
        s = s * div(numerator, denominator, epsilon=epsilon)
    return s


# --- BACKWARD ---

def backward(output, params):
    """d output / d p for every named tensor in params; unused ones get zeros."""
    if output.numel() != 1:
        raise GraphError(f"backward needs a scalar output, got shape {tuple(output.shape)}")
    if output.grad_fn is None and not output.requires_grad:
        raise GraphError("output is not connected to any parameter")
    names = list(params)
    tensors = [params[n] for n in names]
    grads = torch.autograd.grad(output.reshape(()), tensors, allow_unused=True, retain_graph=True)
    return {n: (torch.zeros_like(t) if g is None else g) for n, t, g in zip(names, tensors, grads)}


# --- GRADCHECK ---

@dataclass
class GradcheckCase:
    """A scalar function of named double tensors plus coordinates to skip."""
    fn: Callable
    inputs: dict
    exclude: dict = field(default_factory=dict)  # name -> bool mask of coordinates to skip


@dataclass
class GradcheckReport:
    name: str
    max_rel_error: float
    worst: Optional[tuple]
    checked: int
    skipped: int
    tolerance: float

    @property
    def passed(self):
        return self.checked > 0 and self.max_rel_error < self.tolerance


def relative_error(analytic, numeric):
    return abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))


def gradcheck(name, case, tolerance=PRIMITIVE_TOLERANCE, step=FD_STEP, max_coordinates=MIN_COORDINATES,
              seed=0):
    """Central differences on up to max_coordinates random coordinates per input.

    A coordinate whose one-sided differences disagree by more than
    KINK_TOLERANCE is re-differenced at step / KINK_REFINE. If the gap
    persists it straddles a ReLU kink and is counted as skipped; otherwise
    the finer central difference is compared. A report with no checked
    coordinate never passes.
    """
    inputs = {n: t.detach().clone().requires_grad_(True) for n, t in case.inputs.items()}
    for n, t in inputs.items():
        if t.dtype != torch.float64:
            raise GraphError(f"gradcheck needs double precision, input {n!r} is {t.dtype}")
    analytic = backward(case.fn(inputs), inputs)
    with torch.no_grad():
        base = float(case.fn({n: t.detach() for n, t in inputs.items()}))

    gen = torch.Generator().manual_seed(seed)
    worst, worst_err, checked, skipped = None, 0.0, 0, 0
    for n, t in inputs.items():
        count = t.numel()
        coords = torch.randperm(count, generator=gen)[:max(max_coordinates, MIN_COORDINATES)]
        mask = case.exclude.get(n)
        for i in sorted(coords.tolist()):
            if mask is not None and bool(mask.reshape(-1)[i]):
                skipped += 1
                continue
            numeric, gap = _central(case.fn, inputs, n, i, step, base)
            if gap > KINK_TOLERANCE:
                # smooth curvature shrinks with the step, a kink does not
                numeric, fine_gap = _central(case.fn, inputs, n, i, step / KINK_REFINE, base)
                if fine_gap > KINK_TOLERANCE and fine_gap > KINK_PERSISTENCE * gap:
                    skipped += 1
                    continue
            a = float(analytic[n].reshape(-1)[i])
            err = relative_error(a, numeric)
            checked += 1
            if err > worst_err or worst is None:
                worst_err = err
                worst = (n, tuple(int(k) for k in torch.unravel_index(torch.tensor(i), t.shape)), a, numeric)
    return GradcheckReport(name, worst_err, worst, checked, skipped, tolerance)


def _central(fn, inputs, name, index, step, base):
    """Central difference plus the relative gap between the one-sided ones."""
    f_plus, f_minus = _perturbed(fn, inputs, name, index, step)
    fwd, bwd = (f_plus - base) / step, (base - f_minus) / step
    return (f_plus - f_minus) / (2 * step), abs(fwd - bwd) / max(1.0, abs(fwd), abs(bwd))


def _perturbed(fn, inputs, name, index, step):
    with torch.no_grad():
        frozen = {n: t.detach() for n, t in inputs.items()}
        plus = frozen[name].clone()
        plus.view(-1)[index] += step
        minus = frozen[name].clone()
        minus.view(-1)[index] -= step
        return float(fn({**frozen, name: plus})), float(fn({**frozen, name: minus}))


def projected(fn, gen):
    """Wrap a tensor-valued fn as ⟨r, fn(x)⟩ with a fixed random r."""
    weights = {}

    def scalar(inputs):
        out = fn(inputs)
        if "r" not in weights:
            weights["r"] = torch.randn(out.shape, generator=gen, dtype=out.dtype)
        return torch.sum(weights["r"] * out)

    return scalar


def module_case(module, make_input, gen, loss=None):
    """GradcheckCase over a module's input and every parameter, via functional_call."""
    module = module.double()
    x = make_input()
    params = {f"param.{n}": p.detach().clone() for n, p in module.named_parameters()}

    def run(inputs):
        p = {n[len("param."):]: t for n, t in inputs.items() if n.startswith("param.")}
        return functional_call(module, p, (inputs["x"],))

    fn = projected(run, gen) if loss is None else (lambda inputs: loss(run(inputs)))
    return GradcheckCase(fn, {"x": x, **params})


# --- SUITES ---

def _rand(gen, *shape, low=0.0, high=1.0):
    return low + (high - low) * torch.rand(*shape, generator=gen, dtype=torch.float64)


def _primitive_cases(gen):
    x2 = _rand(gen, 4, 8, 8, low=-1)
    x3 = _rand(gen, 2, 4, 4, 4, low=-1)
    relu_in = _rand(gen, 4, 8, 8, low=-1)
    relu_in.view(-1)[::7] = 0.0
    cases = {
        "correlate": GradcheckCase(projected(lambda i: correlate(i["x"], i["v"]), gen),
                                   {"x": x2, "v": _rand(gen, 3, 4, 3, 3, low=-1)}),
        "correlate_3d": GradcheckCase(projected(lambda i: correlate(i["x"], i["v"]), gen),
                                      {"x": x3, "v": _rand(gen, 2, 2, 3, 3, 3, low=-1)}),
        "strided_correlate": GradcheckCase(
            projected(lambda i: strided_correlate(i["x"], i["w"], i["b"]), gen),
            {"x": x2, "w": _rand(gen, 5, 4, 2, 2, low=-1), "b": _rand(gen, 5)}),
        "transposed_correlate": GradcheckCase(
            projected(lambda i: transposed_correlate(i["x"], i["w"], i["b"]), gen),
            {"x": _rand(gen, 4, 4, 4, low=-1), "w": _rand(gen, 4, 3, 2, 2, low=-1), "b": _rand(gen, 3)}),
        "pad": GradcheckCase(projected(lambda i: pad(i["x"], (1, 2)), gen), {"x": x2}),
        "concat": GradcheckCase(projected(lambda i: concat([i["a"], i["b"]], rank=2), gen),
                                {"a": _rand(gen, 2, 4, 4), "b": _rand(gen, 3, 4, 4)}),
        "slice": GradcheckCase(projected(lambda i: slice_channels(i["x"], 1, 3, 2), gen), {"x": x2}),
        "relu": GradcheckCase(projected(lambda i: relu(i["x"]), gen), {"x": relu_in},
                              exclude={"x": relu_in.abs() <= FD_STEP}),
        "gelu": GradcheckCase(projected(lambda i: gelu(i["x"]), gen), {"x": x2}),
        "add": GradcheckCase(projected(lambda i: add(i["a"], i["b"]), gen),
                             {"a": x2, "b": _rand(gen, 4, 8, 8)}),
        "mul": GradcheckCase(projected(lambda i: mul(i["a"], i["b"]), gen),
                             {"a": x2, "b": _rand(gen, 4, 8, 8)}),
        "div": GradcheckCase(projected(lambda i: div(i["a"], i["b"]), gen),
                             {"a": x2, "b": _rand(gen, 4, 8, 8, low=0.5, high=1.5)}),
        "instance_norm": GradcheckCase(
            projected(lambda i: instance_norm(i["x"], i["w"], i["b"], rank=2), gen),
            {"x": _rand(gen, 2, 4, 6, 6, low=-1), "w": _rand(gen, 4, low=0.5, high=1.5), "b": _rand(gen, 4)}),
        "instance_norm_3d": GradcheckCase(
            projected(lambda i: instance_norm(i["x"], i["w"], i["b"], rank=3), gen),
            {"x": _rand(gen, 1, 2, 4, 4, 4, low=-1), "w": _rand(gen, 2, low=0.5, high=1.5), "b": _rand(gen, 2)}),
        "pointwise_conv": GradcheckCase(
            projected(lambda i: pointwise_conv(i["x"], i["w"], i["b"]), gen),
            {"x": x2, "w": _rand(gen, 6, 4, low=-1), "b": _rand(gen, 6)}),
        "pointwise_conv_relu": GradcheckCase(
            projected(lambda i: relu(pointwise_conv(i["x"], i["w"])), gen),
            {"x": _rand(gen, 4, 6, 6, low=0.1), "w": _rand(gen, 6, 4, low=0.1)}),
        "ndc_update": GradcheckCase(
            projected(lambda i: ndc_update(i["x"], i["s0"], i["v"], groups=2), gen),
            {"x": _rand(gen, 4, 6, 6, low=0.1), "s0": _rand(gen, 8, 6, 6, low=0.1),
             "v": _rand(gen, 4, 4, 3, 3, low=0.1)}),
    }
    return cases


PRIMITIVES = {"core": _primitive_cases}


def _mixer_cases(gen):
    from deconver_net import DeconvMixer, NdcLayerConfig
    torch.manual_seed(int(torch.randint(0, 2**31 - 1, (1,), generator=gen)))
    mixer = DeconvMixer(4, NdcLayerConfig(channels=4, groups="channels", source_ratio=2, kernel=(3, 3)), rank=2)
    return {"deconv_mixer": module_case(mixer, lambda: _rand(gen, 1, 4, 6, 6, low=-1), gen)}


def _block_cases(gen):
    from deconver_net import DeconverBlock, NdcLayerConfig
    torch.manual_seed(int(torch.randint(0, 2**31 - 1, (1,), generator=gen)))
    ndc = NdcLayerConfig(channels=4, groups="channels", source_ratio=2, kernel=(3, 3))
    block = DeconverBlock(4, ndc, mlp_ratio=2, rank=2)
    return {"deconver_block": module_case(block, lambda: _rand(gen, 1, 4, 6, 6, low=-1), gen)}


def _network_cases(gen):
    from deconver_net import Deconver, DeconverConfig, NdcLayerConfig
    from train_eval import soft_dice_ce_loss
    torch.manual_seed(int(torch.randint(0, 2**31 - 1, (1,), generator=gen)))
    cfg = DeconverConfig(spatial_rank=2, in_channels=1, out_channels=1, depth=2, base_channels=4,
                         mlp_ratio=2, ndc=NdcLayerConfig(groups="channels", source_ratio=2, kernel=(3, 3)))
    mask = (_rand(gen, 1, 1, 8, 8) > 0.5).double()
    case = module_case(Deconver(cfg), lambda: _rand(gen, 1, 1, 8, 8), gen,
                       loss=lambda logits: soft_dice_ce_loss(logits, mask))
    return {"network_with_loss": case}


SUITES = {
    "primitives": (lambda gen: {n: c for build in PRIMITIVES.values() for n, c in build(gen).items()},
                   PRIMITIVE_TOLERANCE),
    "mixer": (_mixer_cases, MODULE_TOLERANCE),
    "block": (_block_cases, MODULE_TOLERANCE),
    "network": (_network_cases, MODULE_TOLERANCE),
}


def run_suite(scope, tolerance=None, seed=0, max_coordinates=MIN_COORDINATES, quiet=False):
    if scope not in SUITES:
        raise GraphError(f"unknown gradcheck scope {scope!r}; choose from {sorted(SUITES)}")
    build, default_tol = SUITES[scope]
    tolerance = default_tol if tolerance is None else tolerance
    gen = torch.Generator().manual_seed(seed)
    cases = build(gen)
    reports = []
    for name, case in progress(cases.items(), desc=f"gradcheck {scope}", total=len(cases), disable=quiet):
        reports.append(gradcheck(name, case, tolerance, max_coordinates=max_coordinates, seed=seed))
    return reports


def format_reports(reports):
    lines = [f"{'op':<24} {'max_rel_error':>14} {'checked':>8} {'skipped':>8}  result"]
    for r in reports:
        lines.append(f"{r.name:<24} {r.max_rel_error:>14.3e} {r.checked:>8} {r.skipped:>8}  "
                     f"{'pass' if r.passed else 'FAIL'}")
    return "\n".join(lines)
