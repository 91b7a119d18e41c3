"""Forward-mode scalar differentiation for kinematic and inertial partials.

A ``Dual`` carries a value and one directional derivative.  Components may
themselves be duals, so second derivatives (needed for velocity-product
terms of articulated dynamics) fall out of nesting two seeding passes.
"""
from __future__ import annotations

import math


class Dual:
    __slots__ = ("re", "ep")

    def __init__(self, re, ep=0.0):
        self.re = re
        self.ep = ep

    def __repr__(self):
        return f"Dual({self.re!r}, {self.ep!r})"

    def __add__(self, other):
        if isinstance(other, Dual):
            return Dual(self.re + other.re, self.ep + other.ep)
        return Dual(self.re + other, self.ep)

    __radd__ = __add__

    def __neg__(self):
        return Dual(-self.re, -self.ep)

    def __sub__(self, other):
        if isinstance(other, Dual):
            return Dual(self.re - other.re, self.ep - other.ep)
        return Dual(self.re - other, self.ep)

    def __rsub__(self, other):
        return Dual(other - self.re, -self.ep)

    def __mul__(self, other):
        if isinstance(other, Dual):
            return Dual(self.re * other.re, self.re * other.ep + self.ep * other.re)
        return Dual(self.re * other, self.ep * other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Dual):
            return Dual(
                self.re / other.re,
                (self.ep * other.re - self.re * other.ep) / (other.re * other.re),
            )
        return Dual(self.re / other, self.ep / other)

    def __rtruediv__(self, other):
        # other / self with other a plain number
        return Dual(other / self.re, -other * self.ep / (self.re * self.re))

    def __pow__(self, exponent):
        if not isinstance(exponent, int):
            raise TypeError("only integer powers are supported")
        out = Dual(1.0, 0.0)
        base = self
        for _ in range(exponent):
            out = out * base
        return out

    # comparisons act on the underlying value so geometric branching works
    def __lt__(self, other):
        return value(self) < value(other)

    def __le__(self, other):
        return value(self) <= value(other)

    def __gt__(self, other):
        return value(self) > value(other)

    def __ge__(self, other):
        return value(self) >= value(other)

    def __float__(self):
        return float(value(self))


def value(x):
    """Strip any dual layers and return the plain float value."""
    while isinstance(x, Dual):
        x = x.re
    return x


def partial(x):
    """Derivative component of ``x`` (0 for plain numbers)."""
    return x.ep if isinstance(x, Dual) else 0.0


def sin(x):
    if isinstance(x, Dual):
        return Dual(sin(x.re), cos(x.re) * x.ep)
    return math.sin(x)


def cos(x):
    if isinstance(x, Dual):
        return Dual(cos(x.re), -sin(x.re) * x.ep)
    return math.cos(x)


def sqrt(x):
    if isinstance(x, Dual):
        s = sqrt(x.re)
        return Dual(s, x.ep / (2.0 * s))
    return math.sqrt(x)


def seed(values, index):
    """Copy of ``values`` (a sequence) with entry ``index`` seeded for d/dx."""
    out = list(values)
    out[index] = Dual(out[index], 1.0)
    return out
