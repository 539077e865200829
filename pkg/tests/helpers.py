"""Shared test harness code."""

from varytoy.tensor import numerical_grad, rel_error


def gradcheck(fn, params, rng, n=20, tol=1e-3):
    for p in params:
        p.zero_grad()
    fn().backward()
    worst = 0.0
    for p in params:
        coords = rng.choice(p.size, size=min(n, p.size), replace=False)
        num = numerical_grad(fn, p, coords)
        ana = p.grad.reshape(-1)[coords]
        err = float(rel_error(ana, num).max())
        assert err < tol, f"relative error {err:.2e} on a {p.shape} parameter"
        worst = max(worst, err)
    return worst


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, ok: bool, detail: str) -> bool:
    """Log one acceptance line; it is printed now and again in the run summary."""
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    return ok
