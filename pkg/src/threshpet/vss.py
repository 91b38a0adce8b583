"""Shamir sharing with Feldman commitments.

A secret ``f(0)`` is split into evaluations ``f(1) .. f(k)`` of a random
degree ``t - 1`` polynomial.  The commitment ``(g^a_0, ..., g^a_{t-1})``
to the coefficients lets anyone check a share without learning it.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import InsufficientSharesError, ParameterError
from .group import Group, GroupElement


@dataclass(frozen=True)
class ShamirShare:
    index: int
    value: int

    def __post_init__(self):
        if self.index == 0:
            raise ParameterError("share index must be nonzero")


@dataclass(frozen=True)
class FeldmanCommitment:
    coeff_commits: tuple[GroupElement, ...]

    @property
    def threshold(self) -> int:
        return len(self.coeff_commits)

    @property
    def public(self) -> GroupElement:
        """``g`` raised to the shared secret."""
        return self.coeff_commits[0]

    def expected(self, index: int) -> GroupElement:
        """``g^f(index)``, by Horner's rule in the exponent."""
        acc = self.coeff_commits[-1]
        for c in reversed(self.coeff_commits[:-1]):
            acc = acc ** index * c
        return acc

    def to_hex(self) -> list[str]:
        return [c.hex() for c in self.coeff_commits]

    @classmethod
    def from_hex(cls, group: Group, items) -> "FeldmanCommitment":
        return cls(tuple(group.from_hex(h) for h in items))

    def combine(self, other: "FeldmanCommitment") -> "FeldmanCommitment":
        """Commitment to the sum of the two shared polynomials."""
        if self.threshold != other.threshold:
            raise ParameterError("commitment thresholds differ")
        return FeldmanCommitment(tuple(a * b for a, b in zip(self.coeff_commits, other.coeff_commits)))


def _eval_poly(coeffs, x: int, q: int) -> int:
    acc = 0
    for c in reversed(coeffs):
        acc = (acc * x + c) % q
    return acc


def check_params(group: Group, t: int, k: int):
    if not 1 <= t <= k:
        raise ParameterError(f"need 1 <= t <= k, got t={t}, k={k}")
    if k >= group.order:
        raise ParameterError(f"k={k} must be below the group order")


def share(group: Group, secret: int, t: int, k: int, rng, coefficients=None):
    """Split ``secret`` into ``k`` shares, any ``t`` of which reconstruct it.

    ``coefficients`` fixes the higher-order coefficients ``a_1..a_{t-1}``
    (tests only); otherwise they are drawn from ``rng``.

    Returns ``(shares, commitment)``.
    """
    check_params(group, t, k)
    q = group.order
    if coefficients is None:
        coefficients = [group.random_scalar(rng) for _ in range(t - 1)]
    elif len(coefficients) != t - 1:
        raise ParameterError("need exactly t - 1 coefficients")
    coeffs = [secret % q] + [c % q for c in coefficients]
    shares = [ShamirShare(i, _eval_poly(coeffs, i, q)) for i in range(1, k + 1)]
    g = group.generator
    commitment = FeldmanCommitment(tuple(g ** a for a in coeffs))
    return shares, commitment


def verify_share(share: ShamirShare, comm: FeldmanCommitment) -> bool:
    if not comm.coeff_commits:
        return False
    group = comm.public.group
    if not 0 <= share.value < group.order:
        return False
    return group.generator ** share.value == comm.expected(share.index)


def lagrange_coefficients(group: Group, indices) -> list[int]:
    """Coefficients for interpolating at 0 from the points at ``indices``."""
    q = group.order
    indices = list(indices)
    if not indices:
        raise ParameterError("need at least one index")
    if len(set(i % q for i in indices)) != len(indices):
        raise ParameterError("duplicate share index")
    if any(i % q == 0 for i in indices):
        raise ParameterError("share index must be nonzero")
    lambdas = []
    for i in indices:
        num, den = 1, 1
        for j in indices:
            if j != i:
                num = num * j % q
                den = den * (j - i) % q
        lambdas.append(num * pow(den, -1, q) % q)
    return lambdas


def _take(items, t: int, index_of):
    items = list(items)
    if t < 1:
        raise ParameterError("threshold must be positive")
    if len({index_of(x) for x in items}) != len(items):
        raise ParameterError("duplicate share index")
    if len(items) < t:
        raise InsufficientSharesError()
    return items[:t]


def reconstruct(group: Group, shares, t: int) -> int:
    """Interpolate ``f(0)`` through the first ``t`` shares."""
    chosen = _take(shares, t, lambda s: s.index)
    lambdas = lagrange_coefficients(group, [s.index for s in chosen])
    return sum(lam * s.value for lam, s in zip(lambdas, chosen)) % group.order


def reconstruct_in_exponent(group: Group, points, t: int) -> GroupElement:
    """Given ``(index, base^f(index))`` pairs, return ``base^f(0)``."""
    chosen = _take(points, t, lambda p: p[0])
    lambdas = lagrange_coefficients(group, [i for i, _ in chosen])
    return group.product(elem ** lam for lam, (_, elem) in zip(lambdas, chosen))


def consistent_secrets(group: Group, shares, t: int) -> list[int]:
    """Every secret consistent with ``shares`` under some degree ``t - 1``
    polynomial, found by exhaustive search.  Only feasible for tiny ``q``.
    """
    q = group.order
    if q > 1 << 16:
        raise ParameterError("exhaustive search needs a toy-sized group")
    shares = list(shares)
    out = []
    for candidate in range(q):
        pts = [(0, candidate)] + [(s.index, s.value) for s in shares]
        basis, rest = pts[:t], pts[t:]
        ok = True
        for x, y in rest:
            # evaluate the interpolant through ``basis`` at x
            acc = 0
            for xi, yi in basis:
                num, den = 1, 1
                for xj, _ in basis:
                    if xj != xi:
                        num = num * (x - xj) % q
                        den = den * (xi - xj) % q
                acc = (acc + yi * num * pow(den, -1, q)) % q
            if acc != y % q:
                ok = False
                break
        if ok:
            out.append(candidate)
    return out
