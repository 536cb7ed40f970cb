import numpy as np
import pytest
import torch

from dqformer.data import GeneratorConfig, generate_samples


def central_difference(fn, tensor: torch.Tensor, indices, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``fn()`` w.r.t. selected entries of ``tensor``."""
    out = []
    flat = tensor.data.view(-1)
    with torch.no_grad():
        for i in indices:
            orig = flat[i].item()
            flat[i] = orig + step
            plus = fn().item()
            flat[i] = orig - step
            minus = fn().item()
            flat[i] = orig
            out.append((plus - minus) / (2 * step))
    return np.array(out)


def autodiff(fn, tensor: torch.Tensor, indices) -> np.ndarray:
    if tensor.grad is not None:
        tensor.grad = None
    fn().backward()
    return tensor.grad.reshape(-1)[list(indices)].detach().numpy().copy()


def assert_gradients_match(fn, tensor, indices, rtol=1e-4, step=1e-5, atol=1e-8):
    numeric = central_difference(fn, tensor, indices, step)
    analytic = autodiff(fn, tensor, indices)
    np.testing.assert_allclose(analytic, numeric, rtol=rtol, atol=atol)


def pick(tensor: torch.Tensor, n: int, seed: int = 0) -> list[int]:
    rng = np.random.default_rng(seed)
    return sorted(rng.choice(tensor.numel(), size=min(n, tensor.numel()), replace=False).tolist())


@pytest.fixture
def float64():
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(prev)


@pytest.fixture(scope="session")
def tiny_samples():
    return [g.sample for g in generate_samples(GeneratorConfig(num_samples=8, seed=11))]


# One pass/fail line per acceptance criterion, printed in the terminal summary.
_ACCEPTANCE: dict[str, tuple[str, list]] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    if report.when == "call" or report.outcome != "passed":
        _ACCEPTANCE[name] = (report.outcome.upper(), report.user_properties)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE):
        outcome, props = _ACCEPTANCE[name]
        label = name.removeprefix("test_").replace("_", " ")
        details = "  ".join(f"{k}={v}" for k, v in props)
        terminalreporter.write_line(f"{outcome:<7} {label}  {details}".rstrip())
