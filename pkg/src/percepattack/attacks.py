"""Rank-flip attacks on similarity metrics.

Every attack takes a triplet (reference plus two distorted images) and a
metric, perturbs the distorted image the metric currently ranks as more
similar (the prey), and succeeds when the ranking flips: the perturbed
image's distance exceeds the untouched image's distance. The reverse attack
mirrors this, making the less similar image overtake the other.

All attacks are deterministic given the triplet, the config, and (for the
one-pixel attack) the seed, and each invocation owns its buffers, so attacks
on distinct triplets can run fully in parallel.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import engine as eng
from .engine import Tensor
from .metrics import Metric
from .optim import (
    LBFGS_CONVERGED_BY_CALLBACK,
    DeConfig,
    LbfgsConfig,
    OptimError,
    differential_evolution,
    lbfgs_minimize,
)

PIXEL_THRESHOLDS = (0.001, 0.01, 0.03)
FLOW_EPS = 1e-12


class AttackError(RuntimeError):
    """Attack preconditions violated (non-finite scores, degenerate inputs)."""


@dataclass
class Triplet:
    """A 2AFC sample: reference, two distortions, and the human vote.

    `human_judgment` is the fraction of raters preferring `i_1`; benchmark
    inclusion requires it to be unanimous (exactly 0.0 or 1.0).
    """

    i_ref: np.ndarray
    i_0: np.ndarray
    i_1: np.ndarray
    human_judgment: float = 0.0

    def __post_init__(self) -> None:
        self.i_ref = np.asarray(self.i_ref, dtype=np.float64)
        self.i_0 = np.asarray(self.i_0, dtype=np.float64)
        self.i_1 = np.asarray(self.i_1, dtype=np.float64)
        for name, img in (("i_ref", self.i_ref), ("i_0", self.i_0), ("i_1", self.i_1)):
            if img.ndim != 3 or img.shape[0] not in (1, 3):
                raise AttackError(f"{name} must be (C, H, W) with C in {{1, 3}}, got {img.shape}")
            if not np.all(np.isfinite(img)):
                raise AttackError(f"{name} contains non-finite values")
        if self.i_0.shape != self.i_ref.shape or self.i_1.shape != self.i_ref.shape:
            raise AttackError("triplet images must share one shape")
        if not 0.0 <= self.human_judgment <= 1.0:
            raise AttackError(f"human_judgment must be in [0, 1], got {self.human_judgment}")

    @property
    def unanimous(self) -> bool:
        return self.human_judgment in (0.0, 1.0)


@dataclass
class PreySelection:
    """The distorted image chosen for attack and the scores that chose it."""

    prey_index: int
    prey: np.ndarray
    other: np.ndarray
    s_prey: float
    s_other: float


@dataclass
class AttackOutcome:
    success: bool
    adv_image: np.ndarray
    s_adv: float
    s_other: float
    s_prey: float
    prey_index: int
    rmse_255: float
    psnr_255: float
    pct_pixels_gt: dict[float, float]
    epsilon_used: float | None = None
    iterations_used: int | None = None
    first_flip_iteration: int | None = None
    diagnostic: str | None = None


def perturbation_stats(original: np.ndarray, adv: np.ndarray) -> tuple[float, float, dict[float, float]]:
    """RMSE/PSNR on the [0, 255] pixel mapping plus per-threshold pixel fractions.

    pixel255 = (pixel + 1) * 127.5, so the 255-scale difference is exactly
    127.5 times the attack-space difference. Thresholded fractions are over
    all channel elements in attack space.
    """
    diff = adv - original
    rmse = 127.5 * math.sqrt(float(np.mean(diff * diff)))
    psnr = math.inf if rmse == 0.0 else 20.0 * math.log10(255.0 / rmse)
    abs_diff = np.abs(diff)
    pct = {thr: float(np.mean(abs_diff > thr)) for thr in PIXEL_THRESHOLDS}
    return rmse, psnr, pct


def rank_loss(s_other: float, s_x: float) -> float:
    """Untargeted attack loss: (s_other / (s_other + s_x) - 1)^2.

    Near 0 when the original rank is intact, 0.25 exactly at the decision
    boundary s_x == s_other, and grows as the rank flips further.
    """
    total = s_other + s_x
    if total <= 0.0:
        raise AttackError(f"rank loss undefined for s_other={s_other}, s_x={s_x}")
    return (s_other / total - 1.0) ** 2


def select_prey(triplet: Triplet, metric: Metric) -> PreySelection:
    """Pick the distorted image more similar to the reference; ties go to i_0."""
    s0 = metric.distance(triplet.i_ref, triplet.i_0)
    s1 = metric.distance(triplet.i_ref, triplet.i_1)
    if not (math.isfinite(s0) and math.isfinite(s1)):
        raise AttackError(f"non-finite metric scores: s_0={s0}, s_1={s1}")
    if s1 < s0:
        return PreySelection(1, triplet.i_1, triplet.i_0, s1, s0)
    return PreySelection(0, triplet.i_0, triplet.i_1, s0, s1)


def _rank_loss_node(s_other: float, s_node: Tensor) -> Tensor:
    return eng.square(s_other / (s_other + s_node) - 1.0)


def _reverse_loss_node(s_other: float, s_node: Tensor) -> Tensor:
    return eng.square(s_other / (s_other + s_node))


def _outcome(sel: PreySelection, adv: np.ndarray, s_adv: float, success: bool, **extra) -> AttackOutcome:
    rmse, psnr, pct = perturbation_stats(extra.pop("baseline", sel.prey), adv)
    return AttackOutcome(
        success=success,
        adv_image=adv,
        s_adv=s_adv,
        s_other=sel.s_other,
        s_prey=sel.s_prey,
        prey_index=sel.prey_index,
        rmse_255=rmse,
        psnr_255=psnr,
        pct_pixels_gt=pct,
        **extra,
    )


# -- FGSM ---------------------------------------------------------------------


def fgsm_attack(triplet: Triplet, metric: Metric,
                max_eps: float = 0.05, eps_step: float = 1e-4) -> AttackOutcome:
    """Single signed-gradient direction, epsilon swept upward on a fixed grid.

    The gradient of the rank loss is computed once at the prey; candidates
    prey + eps * sign(grad) are clipped to [-1, 1] and rescored for each grid
    epsilon until the smallest flipping value is found.
    """
    sel = select_prey(triplet, metric)
    prey_t = Tensor(sel.prey, requires_grad=True)
    loss = _rank_loss_node(sel.s_other, metric.graph(Tensor(triplet.i_ref), prey_t))
    signs = np.sign(eng.gradient(loss, prey_t))
    if not np.any(signs):
        return _outcome(sel, sel.prey.copy(), sel.s_prey, False, diagnostic="zero_gradient")

    adv = sel.prey
    s_adv = sel.s_prey
    n_steps = int(round(max_eps / eps_step))
    for k in range(1, n_steps + 1):
        eps = k * eps_step
        adv = np.clip(sel.prey + eps * signs, -1.0, 1.0)
        s_adv = metric.distance(triplet.i_ref, adv)
        if s_adv > sel.s_other:
            return _outcome(sel, adv, s_adv, True, epsilon_used=eps)
    return _outcome(sel, adv, s_adv, False, epsilon_used=n_steps * eps_step)


# -- PGD ------------------------------------------------------------------------


def _pgd_ascend(prey: np.ndarray, ref: np.ndarray, s_other: float, metric: Metric,
                eps: float, alpha: float, max_iters: int,
                loss_node, flipped, stop_on_flip: bool):
    """Iterated signed-gradient ascent with the perturbation clipped to the
    eps-ball around `prey` and the image clipped to [-1, 1], in that loop
    order (score, check, step, project)."""
    delta = np.zeros_like(prey)
    ref_t = Tensor(ref)
    first_flip = None
    k = 0
    while k <= max_iters:
        adv = np.clip(prey + delta, -1.0, 1.0)
        adv_t = Tensor(adv, requires_grad=True)
        s_node = metric.graph(ref_t, adv_t)
        s_adv = s_node.item()
        if not math.isfinite(s_adv):
            raise AttackError(f"non-finite score at PGD iteration {k}")
        if flipped(s_adv):
            if first_flip is None:
                first_flip = k
            if stop_on_flip:
                return adv, s_adv, k, first_flip
        if k == max_iters:
            return adv, s_adv, k, first_flip
        grad = eng.gradient(loss_node(s_node), adv_t)
        stepped = adv + alpha * np.sign(grad)
        delta = np.clip(stepped - prey, -eps, eps)
        k += 1
    raise AssertionError("unreachable")


def pgd_attack(triplet: Triplet, metric: Metric,
               eps: float = 0.03, alpha: float = 0.001, max_iters: int = 30) -> AttackOutcome:
    """Projected signed-gradient ascent on the rank loss; stops at the first flip."""
    sel = select_prey(triplet, metric)
    adv, s_adv, iters, first_flip = _pgd_ascend(
        sel.prey, triplet.i_ref, sel.s_other, metric, eps, alpha, max_iters,
        loss_node=lambda s: _rank_loss_node(sel.s_other, s),
        flipped=lambda s: s > sel.s_other,
        stop_on_flip=True,
    )
    return _outcome(sel, adv, s_adv, s_adv > sel.s_other,
                    iterations_used=iters, first_flip_iteration=first_flip)


def pgd_fixed_iterations(triplet: Triplet, metric: Metric, iterations: int,
                         eps: float = 0.03, alpha: float = 0.001,
                         start: np.ndarray | None = None,
                         baseline: np.ndarray | None = None) -> AttackOutcome:
    """PGD run for exactly `iterations` gradient steps with no early stop.

    `start` recenters the eps-ball (used when stacking on another attack's
    output); imperceptibility stats are reported against `baseline` (the
    original prey by default).
    """
    sel = select_prey(triplet, metric)
    center = sel.prey if start is None else np.asarray(start, dtype=np.float64)
    adv, s_adv, iters, first_flip = _pgd_ascend(
        center, triplet.i_ref, sel.s_other, metric, eps, alpha, iterations,
        loss_node=lambda s: _rank_loss_node(sel.s_other, s),
        flipped=lambda s: s > sel.s_other,
        stop_on_flip=False,
    )
    return _outcome(sel, adv, s_adv, s_adv > sel.s_other,
                    iterations_used=iters, first_flip_iteration=first_flip,
                    baseline=sel.prey if baseline is None else baseline)


def reverse_pgd_attack(triplet: Triplet, metric: Metric,
                       eps: float = 0.03, alpha: float = 0.001,
                       max_iters: int = 30) -> AttackOutcome:
    """Attack the less similar image so it overtakes the other.

    Prey selection is the mirror of :func:`select_prey`; the loss
    (s_other / (s_other + s_adv))^2 grows as s_adv drops, and the same
    signed-gradient ascent drives s_adv below s_other.
    """
    forward = select_prey(triplet, metric)
    sel = PreySelection(
        prey_index=1 - forward.prey_index,
        prey=forward.other,
        other=forward.prey,
        s_prey=forward.s_other,
        s_other=forward.s_prey,
    )
    adv, s_adv, iters, first_flip = _pgd_ascend(
        sel.prey, triplet.i_ref, sel.s_other, metric, eps, alpha, max_iters,
        loss_node=lambda s: _reverse_loss_node(sel.s_other, s),
        flipped=lambda s: s < sel.s_other,
        stop_on_flip=True,
    )
    return _outcome(sel, adv, s_adv, s_adv < sel.s_other,
                    iterations_used=iters, first_flip_iteration=first_flip)


# -- one-pixel ------------------------------------------------------------------


def one_pixel_attack(triplet: Triplet, metric: Metric, de: DeConfig | None = None) -> AttackOutcome:
    """Black-box single-pixel substitution searched with differential evolution.

    The genome is (row, col, <one value per channel>); positions are real
    valued and rounded at evaluation. The objective maximizes the candidate's
    distance, with an early stop as soon as any candidate flips the rank.
    """
    de = de or DeConfig()
    sel = select_prey(triplet, metric)
    c, h, w = sel.prey.shape
    bounds = np.array([[0.0, float(h - 1)], [0.0, float(w - 1)]] + [[-1.0, 1.0]] * c)

    def build(genome: np.ndarray) -> np.ndarray:
        row = int(np.clip(round(genome[0]), 0, h - 1))
        col = int(np.clip(round(genome[1]), 0, w - 1))
        img = sel.prey.copy()
        img[:, row, col] = np.clip(genome[2:], -1.0, 1.0)
        return img

    def objective(genome: np.ndarray) -> float:
        return -metric.distance(triplet.i_ref, build(genome))

    def flips(genome: np.ndarray) -> bool:
        return metric.distance(triplet.i_ref, build(genome)) > sel.s_other

    result = differential_evolution(objective, bounds, de, early_stop=flips)
    adv = build(result.x)
    s_adv = metric.distance(triplet.i_ref, adv)
    return _outcome(sel, adv, s_adv, s_adv > sel.s_other,
                    iterations_used=result.generations,
                    diagnostic=None if result.stopped_early else "de_exhausted")


# -- stAdv ------------------------------------------------------------------------


# Difference kernels pairing each flow channel with its right / lower neighbor.
_NEIGHBOR_COL_KERNEL = np.zeros((2, 2, 1, 2))
_NEIGHBOR_COL_KERNEL[0, 0, 0] = (1.0, -1.0)
_NEIGHBOR_COL_KERNEL[1, 1, 0] = (1.0, -1.0)
_NEIGHBOR_ROW_KERNEL = np.zeros((2, 2, 2, 1))
_NEIGHBOR_ROW_KERNEL[0, 0, :, 0] = (1.0, -1.0)
_NEIGHBOR_ROW_KERNEL[1, 1, :, 0] = (1.0, -1.0)


def flow_smoothness(flow: Tensor) -> Tensor:
    """Total-variation-style penalty over 4-neighbor displacement differences.

    Each ordered neighbor pair contributes sqrt(d_row^2 + d_col^2 + 1e-12)
    minus the zero-difference baseline, so a constant field scores exactly 0
    while staying differentiable at zero.
    """
    if flow.data.shape[0] != 2 or flow.data.ndim != 3:
        raise AttackError(f"flow must be (2, H, W), got {flow.data.shape}")
    baseline = math.sqrt(FLOW_EPS)
    channel_sum = np.ones((1, 2, 1, 1))
    total: Tensor | None = None
    for kern in (_NEIGHBOR_COL_KERNEL, _NEIGHBOR_ROW_KERNEL):
        diffs = eng.conv2d(flow, kern)
        mag = eng.sqrt(eng.conv2d(eng.square(diffs), channel_sum) + FLOW_EPS) - baseline
        pair_sum = eng.global_sum(mag)
        total = pair_sum if total is None else total + pair_sum
    return 2.0 * total  # each undirected pair appears once per direction


def stadv_rank_loss(s_other: float, s_adv: float) -> float:
    """Spatial-attack ranking loss (s_other / (s_other + s_adv))^2; 0.25 at the boundary."""
    total = s_other + s_adv
    if total <= 0.0:
        raise AttackError(f"rank loss undefined for s_other={s_other}, s_adv={s_adv}")
    return (s_other / total) ** 2


def stadv_attack(triplet: Triplet, metric: Metric,
                 alpha_rank: float = 50.0, beta_flow: float = 0.05,
                 max_iterations: int = 250) -> AttackOutcome:
    """Optimize a per-pixel flow field so the warped prey loses its rank.

    The flow starts at zero and L-BFGS minimizes
    alpha * (s_other/(s_other+s_adv))^2 + beta * flow_smoothness; the
    optimizer halts the moment any evaluated flow flips the rank, and the
    adversarial image is the bilinear warp of the prey by that flow.
    """
    sel = select_prey(triplet, metric)
    _, h, w = sel.prey.shape
    prey_t = Tensor(sel.prey)
    ref_t = Tensor(triplet.i_ref)

    def objective(x: np.ndarray):
        flow_t = Tensor(x.reshape(2, h, w), requires_grad=True)
        s_node = metric.graph(ref_t, eng.bilinear_warp(prey_t, flow_t))
        s_adv = s_node.item()
        loss = alpha_rank * eng.square(sel.s_other / (sel.s_other + s_node)) \
            + beta_flow * flow_smoothness(flow_t)
        return loss.item(), eng.gradient(loss, flow_t).ravel(), s_adv > sel.s_other

    config = LbfgsConfig(max_iterations=max_iterations, gradient_tolerance=1e-10)
    try:
        result = lbfgs_minimize(objective, np.zeros(2 * h * w), config)
    except OptimError as exc:
        return _outcome(sel, sel.prey.copy(), sel.s_prey, False,
                        iterations_used=0, diagnostic=f"lbfgs_diverged: {exc}")

    flow = Tensor(result.x.reshape(2, h, w))
    adv = eng.bilinear_warp(prey_t, flow).data.copy()
    s_adv = metric.distance(triplet.i_ref, adv)
    success = result.status == LBFGS_CONVERGED_BY_CALLBACK and s_adv > sel.s_other
    return _outcome(sel, adv, s_adv, success, iterations_used=result.iterations,
                    diagnostic=None if success else result.status)


def combined_stadv_pgd(triplet: Triplet, metric: Metric, k: int,
                       eps: float = 0.03, alpha: float = 0.001,
                       stadv_outcome: AttackOutcome | None = None,
                       **stadv_kwargs) -> AttackOutcome:
    """Stack exactly k PGD iterations on top of a successful stAdv output.

    PGD runs for all k steps even if the flip lands earlier (the first flip
    iteration is still recorded); pass `stadv_outcome` to reuse a previously
    computed spatial stage. Imperceptibility stats are reported against the
    original prey.
    """
    stage = stadv_outcome or stadv_attack(triplet, metric, **stadv_kwargs)
    if not stage.success:
        raise AttackError("combined attack requires a successful stAdv stage")
    sel = select_prey(triplet, metric)
    if k == 0:
        out = _outcome(sel, stage.adv_image.copy(), stage.s_adv,
                       stage.s_adv > sel.s_other, iterations_used=0)
        return out
    return pgd_fixed_iterations(triplet, metric, k, eps=eps, alpha=alpha,
                                start=stage.adv_image, baseline=sel.prey)
