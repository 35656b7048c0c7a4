"""Finite-difference checks of the differentiable components.

Every registered component builds a small float64 problem from a seed: a
scalar objective and the leaf tensors it depends on. `grad_check` compares
autograd gradients with central differences on a seeded subset of entries
per tensor and returns the worst relative error.
"""

import logging
from typing import Callable

import torch

from cuedepth.camgeom import Intrinsics, PoseSE3, warp
from cuedepth.config import LossConfig
from cuedepth.ham import HighDimensionalAttention
from cuedepth.kittidata import FrameSample
from cuedepth.networks import Bottleneck, PoseDecoder
from cuedepth.photoloss import photometric_error, smoothness_loss, ssim_loss, total_loss

logger = logging.getLogger(__name__)

Problem = tuple[Callable[[], torch.Tensor], list[torch.Tensor]]

COMPONENTS: dict[str, Callable[[torch.Generator], Problem]] = {}
ALIASES = {"ham": "ham_forward", "losses": "total_loss"}

MAX_ENTRIES = 48


def register(name: str):
    def wrap(builder):
        COMPONENTS[name] = builder
        return builder

    return wrap


def _rand(generator, *shape, low=0.0, high=1.0) -> torch.Tensor:
    x = torch.rand(shape, generator=generator, dtype=torch.float64)
    return (low + (high - low) * x).requires_grad_()


def _randn(generator, *shape, scale=1.0) -> torch.Tensor:
    return (scale * torch.randn(shape, generator=generator, dtype=torch.float64)).requires_grad_()


def _weighted(output: torch.Tensor, generator) -> Callable[[torch.Tensor], torch.Tensor]:
    weights = torch.randn(output.shape, generator=generator, dtype=torch.float64)
    return lambda out: (out * weights).sum()


def _module_problem(module: torch.nn.Module, x: torch.Tensor, generator, head=None) -> Problem:
    module = module.double().train()
    head = head or (lambda out: out)
    reduce = _weighted(head(module(x)).detach(), generator)
    return (lambda: reduce(head(module(x)))), [x, *module.parameters()]


@register("warp")
def _warp(generator) -> Problem:
    source = _rand(generator, 1, 3, 8, 8)
    depth = _rand(generator, 1, 1, 8, 8, low=2.0, high=4.0)
    rotation = _randn(generator, 1, 3, scale=0.02)
    translation = _randn(generator, 1, 3, scale=0.05)
    camera = Intrinsics(8.0, 8.0, 3.5, 3.5, 8, 8)

    def objective_output():
        return warp(source, depth, camera, PoseSE3(rotation, translation))[0]

    reduce = _weighted(objective_output().detach(), generator)
    return (lambda: reduce(objective_output())), [source, depth, rotation, translation]


@register("ssim_loss")
def _ssim(generator) -> Problem:
    a, b = _rand(generator, 1, 3, 8, 8), _rand(generator, 1, 3, 8, 8)
    reduce = _weighted(ssim_loss(a, b).detach(), generator)
    return (lambda: reduce(ssim_loss(a, b))), [a, b]


@register("photometric_error")
def _photometric(generator) -> Problem:
    a, b = _rand(generator, 1, 3, 8, 8), _rand(generator, 1, 3, 8, 8)
    reduce = _weighted(photometric_error(a, b).detach(), generator)
    return (lambda: reduce(photometric_error(a, b))), [a, b]


@register("smoothness_loss")
def _smoothness(generator) -> Problem:
    disp = _rand(generator, 1, 1, 6, 6, low=0.5, high=1.5)
    image = _rand(generator, 1, 3, 6, 6)
    return (lambda: smoothness_loss(disp, image)), [disp, image]


@register("total_loss")
def _total(generator) -> Problem:
    size = 8
    target = torch.rand(1, 3, size, size, generator=generator, dtype=torch.float64)
    sources = {r: torch.rand(1, 3, size, size, generator=generator, dtype=torch.float64) for r in ("prev", "next")}
    camera = Intrinsics(8.0, 8.0, 3.5, 3.5, size, size)
    sample = FrameSample(target=target, sources=sources, intrinsics=camera.pyramid(4, torch.float64)[None])
    disparities = [_rand(generator, 1, 1, size >> s, size >> s, low=0.2, high=0.8) for s in range(4)]
    rotations = {r: _randn(generator, 1, 3, scale=0.01) for r in sources}
    translations = {r: _randn(generator, 1, 3, scale=0.03) for r in sources}
    cfg = LossConfig()

    def objective():
        poses = {r: PoseSE3(rotations[r], translations[r]) for r in sources}
        return total_loss(disparities, sample, poses, cfg, min_depth=1.0, max_depth=10.0).total

    return objective, [*disparities, *rotations.values(), *translations.values()]


@register("ham_forward")
def _ham(generator) -> Problem:
    module = HighDimensionalAttention(2)
    with torch.no_grad():
        module.beta.fill_(0.7)
    return _module_problem(module, _randn(generator, 1, 2, 4, 4), generator)


@register("bottleneck")
def _bottleneck(generator) -> Problem:
    return _module_problem(Bottleneck(8), _randn(generator, 2, 8, 4, 4), generator)


@register("pose_head")
def _pose_head(generator) -> Problem:
    decoder = PoseDecoder(8, 8).double()
    attention = HighDimensionalAttention(8).double().train()
    with torch.no_grad():
        attention.beta.fill_(0.5)
    x = _randn(generator, 2, 8, 2, 2)

    def output():
        return decoder(x, attention).as_vector()

    reduce = _weighted(output().detach(), generator)
    return (lambda: reduce(output())), [x, *decoder.parameters(), *attention.parameters()]


def resolve(component: str) -> str:
    """Canonical registry name of a component.

    Raises:
        ValueError: If the name is not registered.
    """
    name = ALIASES.get(component, component)
    if name not in COMPONENTS:
        raise ValueError(
            f"Unknown component '{component}'. Registered: {', '.join(sorted(COMPONENTS))}."
        )
    return name


def finite_difference_error(
    objective: Callable[[], torch.Tensor],
    inputs: list[torch.Tensor],
    step: float = 1e-5,
    max_entries: int = MAX_ENTRIES,
    generator: torch.Generator | None = None,
) -> float:
    """Worst per-tensor relative error of autograd against central differences.

    The per-tensor error is ``||a - n||_inf / max(||a||_inf, ||n||_inf)``,
    zero when both norms are below 1e-12. Entries whose step straddles a kink
    or jump of the objective (ReLU, absolute value, masks) show a second
    difference far above the smooth curvature and are left out.
    """
    inputs = [x for x in inputs if x.requires_grad]
    loss = objective()
    loss.backward()
    centre = loss.item()
    analytic = [torch.zeros_like(x) if x.grad is None else x.grad.detach().clone() for x in inputs]

    worst, skipped = 0.0, 0
    with torch.no_grad():
        for x, grad in zip(inputs, analytic):
            flat = x.view(-1)
            count = flat.numel()
            if count > max_entries:
                entries = torch.randperm(count, generator=generator)[:max_entries].tolist()
            else:
                entries = range(count)
            a, n, kinks = [], [], []
            for i in entries:
                original = flat[i].item()
                flat[i] = original + step
                plus = objective().item()
                flat[i] = original - step
                minus = objective().item()
                flat[i] = original
                n.append((plus - minus) / (2 * step))
                a.append(grad.view(-1)[i].item())
                kinks.append(abs(plus - 2 * centre + minus) / (2 * step))
            a = torch.tensor(a, dtype=torch.float64)
            n = torch.tensor(n, dtype=torch.float64)
            reference = max(grad.abs().max().item(), 1e-12)
            smooth = torch.tensor(kinks, dtype=torch.float64) <= 1e-4 * reference
            skipped += int((~smooth).sum())
            if not smooth.any():
                continue
            scale = max(grad.abs().max().item(), n[smooth].abs().max().item())
            if scale < 1e-12:
                continue
            worst = max(worst, (a - n)[smooth].abs().max().item() / scale)
    if skipped:
        logger.debug("Skipped %d entries straddling a non-smooth point.", skipped)
    return worst


def grad_check(component: str, seed: int = 0, step: float = 1e-5) -> float:
    """Checks one registered component.

    Args:
        component (str): Registry name or alias (``ham``, ``losses``).
        seed (int): Seed of the problem instance and of the sampled entries.
        step (float): Central-difference step.

    Raises:
        ValueError: If the component is not registered.

    Returns:
        float: Maximum relative gradient error over the component's inputs.
    """
    name = resolve(component)
    generator = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    objective, inputs = COMPONENTS[name](generator)
    error = finite_difference_error(objective, inputs, step, generator=generator)
    logger.info("grad-check %s (seed %d): max relative error %.3e", name, seed, error)
    return error
