"""Central finite-difference checks for every differentiable op and the full loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .data import gen_dataset
from .ian import IanConfig, init_seb, init_vab, seb_attend, seb_query, vab_forward
from .losses import combined_loss, itdm_loss, itg_loss
from .model import MageModel
from .rng import SplitMix64, derive_seed
from .tensor import Tensor
from .toy_models import LmConfig, ToyCausalLM

H = 1e-5
POINTS = 10
TOLERANCE = 1e-4
# Denominator floor: gradients below this magnitude are compared absolutely.
REL_FLOOR = 1e-6

Case = tuple[str, Callable[[], Tensor], dict[str, Tensor]]


@dataclass(frozen=True)
class GradCheckRow:
    op: str
    tensor: str
    points: int
    max_rel_err: float

    @property
    def ok(self) -> bool:
        return self.max_rel_err < TOLERANCE


def rel_err(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), REL_FLOOR)


def numeric_grad(f: Callable[[], Tensor], x: Tensor, flat_index: int, h: float = H) -> float:
    view = x.data.reshape(-1)
    orig = view[flat_index]
    view[flat_index] = orig + h
    up = f().item()
    view[flat_index] = orig - h
    down = f().item()
    view[flat_index] = orig
    return (up - down) / (2 * h)


def check_case(name: str, f: Callable[[], Tensor], inputs: dict[str, Tensor], rng: SplitMix64,
               points: int = POINTS, h: float = H) -> list[GradCheckRow]:
    for x in inputs.values():
        x.data = np.array(x.data, dtype=np.float64)
        x.requires_grad = True
        x.grad = None
    loss = f()
    loss.backward()
    grads = {k: (np.zeros_like(x.data) if x.grad is None else x.grad.copy()) for k, x in inputs.items()}
    rows = []
    for k, x in inputs.items():
        idx = rng.permutation(x.data.size)[:points]
        worst = max(rel_err(grads[k].reshape(-1)[i], numeric_grad(f, x, int(i), h)) for i in idx)
        rows.append(GradCheckRow(name, k, len(idx), worst))
    return rows


def _weighted(y: Tensor, w: np.ndarray) -> Tensor:
    """Scalarize with fixed random weights so every output element matters."""
    return T.sum_all(T.mul(y, Tensor(w)))


def op_cases(seed: int) -> list[Case]:
    rng = SplitMix64(derive_seed(seed, "gradcheck-inputs"))
    n = rng.normal
    t = lambda *shape: Tensor(n(shape))  # noqa: E731
    cases: list[Case] = []

    def case(name, fn, scalar=False, **inputs):
        if scalar:
            cases.append((name, lambda: fn(**inputs), inputs))
        else:
            w = n(fn(**inputs).shape)
            cases.append((name, lambda: _weighted(fn(**inputs), w), inputs))

    case("add", T.add, a=t(3, 4), b=t(3, 4))
    case("add_row_broadcast", T.add, a=t(3, 4), b=t(4))
    case("sub", T.sub, a=t(3, 4), b=t(3, 4))
    case("mul", T.mul, a=t(3, 4), b=t(3, 4))
    case("mul_row_broadcast", T.mul, a=t(3, 4), b=t(4))
    case("matmul", T.matmul, a=t(3, 5), b=t(5, 2))
    case("scale", lambda x: T.scale(x, -0.7), x=t(3, 4))
    case("gelu", T.gelu, x=t(4, 5))
    case("reshape", lambda x: T.reshape(x, (2, 6)), x=t(3, 4))
    case("transpose", T.transpose, x=t(3, 4))
    case("take_rows", lambda x: T.take_rows(x, [0, 2, 2, 4]), x=t(5, 3))
    case("slice_rows", lambda x: T.slice_rows(x, 1, 3), x=t(4, 3))
    case("concat_rows", lambda a, b: T.concat_rows([a, b]), a=t(2, 3), b=t(3, 3))
    case("sum_all", T.sum_all, scalar=True, x=t(3, 4))
    case("mean_rows", T.mean_rows, x=t(4, 3))
    case("mean_scalars", lambda a, b: T.mean_scalars([T.sum_all(T.mul(a, a)), T.sum_all(b)]),
         scalar=True, a=t(2, 2), b=t(3))
    case("softmax", T.softmax, x=t(3, 6))
    case("layer_norm", T.layer_norm, x=t(4, 6), gamma=t(6), beta=t(6))
    case("conv2d_stride1", lambda x, kernels: T.conv2d(x, kernels, 1), x=t(2, 5, 5), kernels=t(3, 2, 3, 3))
    case("conv2d_stride2", lambda x, kernels: T.conv2d(x, kernels, 2), x=t(2, 6, 6), kernels=t(3, 2, 2, 2))
    case("cross_entropy", lambda logits: T.cross_entropy(logits, [1, 0, 6, 3]), scalar=True, logits=t(4, 7))
    case("mse", T.mse, scalar=True, a=t(3, 4), b=t(3, 4))
    return cases


def _small_configs() -> tuple[IanConfig, LmConfig]:
    ian = IanConfig(d_v=8, d_l=16, d_b=8, grid_in=6, grid_out=3, hidden=16, patch=2)
    return ian, LmConfig(d_l=16, d_ff=32)


def module_cases(seed: int) -> list[Case]:
    rng = SplitMix64(derive_seed(seed, "gradcheck-modules"))
    ian, lm_cfg = _small_configs()
    cases: list[Case] = []

    vab = init_vab(ian, rng)
    seb = init_seb(ian, rng)
    v = Tensor(rng.normal((ian.n_in, ian.d_v)))
    img = Tensor(rng.uniform((ian.c_img, ian.image_side, ian.image_side)))
    w_vab = rng.normal((ian.n_in, ian.d_l))
    vab_in = {"v": v, "w1": vab.w1, "b1": vab.b1, "w2": vab.w2, "b2": vab.b2,
              "gamma": vab.norm_gamma, "beta": vab.norm_beta}
    cases.append(("vab", lambda: _weighted(vab_forward(v, vab), w_vab), vab_in))

    a = Tensor(rng.normal((ian.n_in, ian.d_l)))
    w_seb = rng.normal((ian.n_out, ian.d_l))

    def seb_fn():
        return _weighted(seb_attend(seb_query(img, seb), a, seb)[0], w_seb)

    cases.append(("seb", seb_fn, {"image": img, "keys": a, "conv": seb.conv_kernels, "wq": seb.wq,
                                  "wk": seb.wk, "wv": seb.wv, "wo": seb.wo}))

    lm = ToyCausalLM(lm_cfg, rng)
    prefix = Tensor(rng.normal((5, lm_cfg.d_l)))
    text = [7, 12, 3, 2]
    lm_in = {"prefix": prefix, **{k: p for k, p in lm.named_parameters().items()}}
    cases.append(("lm_itg", lambda: itg_loss(lm.forward(prefix, text), text), lm_in))

    xs = [Tensor(rng.normal((4, 6))), Tensor(rng.normal((3, 6)))]
    ys = [Tensor(rng.normal((2, 6))), Tensor(rng.normal((5, 6)))]
    cases.append(("itdm", lambda: itdm_loss(xs, ys), {"x0": xs[0], "x1": xs[1], "y0": ys[0], "y1": ys[1]}))
    return cases


def composite_case(seed: int) -> Case:
    """Total loss through encoder -> IAN -> LM with every parameter trainable."""
    ian, lm_cfg = _small_configs()
    model = MageModel(ian, lm_cfg, seed)
    batch = gen_dataset(2, seed, ian.image_side)
    return ("composite_loss", lambda: combined_loss(batch, model, 1.0).loss, model.named_parameters())


def run_gradcheck(seed: int = 0, points: int = POINTS) -> list[GradCheckRow]:
    rng = SplitMix64(derive_seed(seed, "gradcheck-points"))
    rows: list[GradCheckRow] = []
    for name, f, inputs in op_cases(seed) + module_cases(seed) + [composite_case(seed)]:
        rows.extend(check_case(name, f, inputs, rng, points))
    return rows


def per_op(rows: list[GradCheckRow]) -> dict[str, float]:
    out: dict[str, float] = {}
    for r in rows:
        out[r.op] = max(out.get(r.op, 0.0), r.max_rel_err)
    return out


def format_table(rows: list[GradCheckRow]) -> str:
    table = per_op(rows)
    width = max(len(k) for k in table)
    lines = [f"{'op':<{width}}  max_rel_err  status"]
    for op, err in table.items():
        lines.append(f"{op:<{width}}  {err:11.3e}  {'ok' if err < TOLERANCE else 'FAIL'}")
    return "\n".join(lines)
