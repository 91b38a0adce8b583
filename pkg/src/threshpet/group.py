"""Prime-order groups, scalar arithmetic and hashing.

Two backends share one interface:

* ``toy`` -- the order-11 subgroup of (Z/23Z)^*, generated by 2.  Small
  enough that discrete logs, share consistency and hash collisions can be
  checked by exhaustive search.
* ``secp256k1`` -- the production backend (alias ``prod``).

Scalars are plain ``int`` values reduced mod ``q``.  Group elements are
:class:`GroupElement` instances written multiplicatively: ``a * b``,
``a ** e``, ``~a``.
"""

from __future__ import annotations

import hashlib
import random
import secrets
from dataclasses import dataclass

from ecdsa import SECP256k1
from ecdsa.ellipticcurve import INFINITY, PointJacobi
from ecdsa.errors import MalformedPointError

from .errors import DecodeError, NonInvertibleError, ParameterError


def make_rng(seed=None):
    """Seeded ``random.Random`` for replayable runs, OS entropy otherwise."""
    if seed is None:
        return secrets.SystemRandom()
    return random.Random(seed)


def _tagged(tag: bytes, data: bytes, counter: int | None = None) -> bytes:
    out = len(tag).to_bytes(2, "big") + tag + len(data).to_bytes(8, "big") + data
    if counter is not None:
        out += counter.to_bytes(4, "big")
    return out


class GroupElement:
    __slots__ = ("group", "raw")

    def __init__(self, group: "Group", raw):
        self.group = group
        self.raw = raw

    def __mul__(self, other: "GroupElement") -> "GroupElement":
        return GroupElement(self.group, self.group._op(self.raw, other.raw))

    def __pow__(self, e: int) -> "GroupElement":
        return self.group.exp(self, e)

    def __invert__(self) -> "GroupElement":
        return GroupElement(self.group, self.group._inv(self.raw))

    def __truediv__(self, other: "GroupElement") -> "GroupElement":
        return self * ~other

    def __eq__(self, other):
        if not isinstance(other, GroupElement):
            return NotImplemented
        return self.group is other.group and self.encode() == other.encode()

    def __hash__(self):
        return hash((self.group.name, self.encode()))

    def __repr__(self):
        return f"GroupElement({self.group.name}, {self.hex()})"

    @property
    def is_identity(self) -> bool:
        return self == self.group.identity

    def encode(self) -> bytes:
        return self.group._encode(self.raw)

    def hex(self) -> str:
        return self.encode().hex()


@dataclass(frozen=True)
class GroupDesc:
    id: str
    q: int
    generator_encoding: bytes

    def to_dict(self):
        return {"id": self.id, "q": format(self.q, "x"), "generator": self.generator_encoding.hex()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["id"], int(d["q"], 16), bytes.fromhex(d["generator"]))


class Group:
    """Cyclic group of prime order ``order``; subclasses supply raw arithmetic."""

    name: str
    order: int

    # -- raw backend hooks ---------------------------------------------
    def _op(self, a, b): raise NotImplementedError
    def _inv(self, a): raise NotImplementedError
    def _pow(self, a, e: int): raise NotImplementedError
    def _encode(self, a) -> bytes: raise NotImplementedError
    def _decode(self, data: bytes): raise NotImplementedError
    def _hash_to_group(self, tag: bytes, data: bytes): raise NotImplementedError

    # -- elements -------------------------------------------------------
    def exp(self, base: GroupElement, e: int) -> GroupElement:
        return GroupElement(self, self._pow(base.raw, e % self.order))

    def product(self, elements) -> GroupElement:
        acc = self.identity
        for x in elements:
            acc = acc * x
        return acc

    def decode(self, data: bytes) -> GroupElement:
        return GroupElement(self, self._decode(bytes(data)))

    def from_hex(self, text: str) -> GroupElement:
        try:
            raw = bytes.fromhex(text)
        except (ValueError, TypeError) as exc:
            raise DecodeError(f"bad hex group element: {text!r}") from exc
        return self.decode(raw)

    @property
    def desc(self) -> GroupDesc:
        return GroupDesc(self.name, self.order, self.generator.encode())

    # -- scalars --------------------------------------------------------
    @property
    def scalar_size(self) -> int:
        return (self.order.bit_length() + 7) // 8

    def encode_scalar(self, x: int) -> bytes:
        return (x % self.order).to_bytes(self.scalar_size, "big")

    def decode_scalar(self, data: bytes) -> int:
        if len(data) != self.scalar_size:
            raise DecodeError("scalar has wrong width")
        x = int.from_bytes(data, "big")
        if x >= self.order:
            raise DecodeError("scalar out of range")
        return x

    def scalar_hex(self, x: int) -> str:
        return self.encode_scalar(x).hex()

    def scalar_from_hex(self, text: str) -> int:
        try:
            raw = bytes.fromhex(text)
        except (ValueError, TypeError) as exc:
            raise DecodeError(f"bad hex scalar: {text!r}") from exc
        return self.decode_scalar(raw)

    def random_scalar(self, rng, nonzero=False) -> int:
        if nonzero:
            return 1 + rng.randrange(self.order - 1)
        return rng.randrange(self.order)

    def scalar_arith(self, a: int, b: int, op: str) -> int:
        q = self.order
        if op == "add":
            return (a + b) % q
        if op == "sub":
            return (a - b) % q
        if op == "mul":
            return (a * b) % q
        if op == "inv":
            if a % q == 0:
                raise NonInvertibleError()
            return pow(a, -1, q)
        raise ParameterError(f"unknown scalar op {op!r}")

    def inv(self, a: int) -> int:
        return self.scalar_arith(a, 0, "inv")

    # -- hashing --------------------------------------------------------
    def hash_to_scalar(self, tag: bytes, data: bytes) -> int:
        digest = hashlib.sha512(_tagged(tag, data)).digest()
        return int.from_bytes(digest, "big") % self.order

    def hash_to_group(self, tag: bytes, data: bytes) -> GroupElement:
        return GroupElement(self, self._hash_to_group(tag, data))


class ModPGroup(Group):
    """Order-``q`` subgroup of (Z/pZ)^* with ``q | p - 1``."""

    def __init__(self, name: str, p: int, q: int, g: int):
        if (p - 1) % q:
            raise ParameterError("q must divide p - 1")
        if pow(g, q, p) != 1 or g % p == 1:
            raise ParameterError("generator does not have order q")
        self.name = name
        self.p = p
        self.order = q
        self.cofactor = (p - 1) // q
        self._width = (p.bit_length() + 7) // 8
        self.generator = GroupElement(self, g)
        self.identity = GroupElement(self, 1)

    def _op(self, a, b):
        return a * b % self.p

    def _inv(self, a):
        return pow(a, -1, self.p)

    def _pow(self, a, e):
        return pow(a, e, self.p)

    def _encode(self, a):
        return a.to_bytes(self._width, "big")

    def _decode(self, data):
        if len(data) != self._width:
            raise DecodeError("element has wrong width")
        x = int.from_bytes(data, "big")
        if not 0 < x < self.p or pow(x, self.order, self.p) != 1:
            raise DecodeError("not an element of the subgroup")
        return x

    def _hash_to_group(self, tag, data):
        # Hash to the full group, then clear the cofactor.  Deriving the
        # output as g ** hash_to_scalar(...) would leak its discrete log.
        counter = 0
        while True:
            digest = hashlib.sha512(_tagged(tag, data, counter)).digest()
            x = int.from_bytes(digest, "big") % self.p
            counter += 1
            if x == 0:
                continue
            y = pow(x, self.cofactor, self.p)
            if y != 1:
                return y


class Secp256k1Group(Group):
    """secp256k1 (prime order, cofactor 1) with SEC1 compressed encodings."""

    def __init__(self):
        self.name = "secp256k1"
        self.order = SECP256k1.order
        self._curve = SECP256k1.curve
        self._p = self._curve.p()
        self.generator = GroupElement(self, SECP256k1.generator)
        self.identity = GroupElement(self, INFINITY)

    def _op(self, a, b):
        # ecdsa's INFINITY has no curve attached; keep it out of point arithmetic
        if a == INFINITY:
            return b
        if b == INFINITY:
            return a
        out = a + b
        return INFINITY if out == INFINITY else out

    def _inv(self, a):
        return INFINITY if a == INFINITY else -a

    def _pow(self, a, e):
        if e == 0 or a == INFINITY:
            return INFINITY
        return a * e

    def _encode(self, a):
        if a == INFINITY:
            return b"\x00"
        return a.to_bytes("compressed")

    def _decode(self, data):
        if data == b"\x00":
            return INFINITY
        if len(data) != 33:
            raise DecodeError("element has wrong width")
        try:
            return PointJacobi.from_bytes(
                self._curve, data, valid_encodings=("compressed",), order=self.order
            )
        except (MalformedPointError, ValueError, AssertionError) as exc:
            raise DecodeError("not a curve point") from exc

    def _hash_to_group(self, tag, data):
        # try-and-increment on the x coordinate; p = 3 mod 4 so sqrt is one pow
        p = self._p
        counter = 0
        while True:
            x = int.from_bytes(hashlib.sha256(_tagged(tag, data, counter)).digest(), "big")
            counter += 1
            if x >= p:
                continue
            rhs = (pow(x, 3, p) + 7) % p
            y = pow(rhs, (p + 1) // 4, p)
            if y * y % p != rhs:
                continue
            if y & 1:
                y = p - y
            return PointJacobi(self._curve, x, y, 1, self.order)


TOY = ModPGroup("toy", 23, 11, 2)
SECP256K1 = Secp256k1Group()

_BACKENDS = {"toy": TOY, "secp256k1": SECP256K1, "prod": SECP256K1}


def get_group(name: str) -> Group:
    try:
        return _BACKENDS[name]
    except KeyError:
        raise ParameterError(f"unknown group backend {name!r}") from None


def group_from_desc(desc: GroupDesc) -> Group:
    group = get_group(desc.id)
    if group.order != desc.q or group.generator.encode() != desc.generator_encoding:
        raise ParameterError(f"group description does not match backend {desc.id!r}")
    return group
