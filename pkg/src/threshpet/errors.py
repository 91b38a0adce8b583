"""Exception hierarchy.

Protocol rejections (expired, duplicate user, ...) are kept separate from
parameter errors and verification failures so the CLI can map them onto
distinct exit codes.
"""


class ThreshPetError(Exception):
    """Base class for every error raised by this package."""


class ParameterError(ThreshPetError, ValueError):
    pass


class NonInvertibleError(ThreshPetError, ArithmeticError):
    def __init__(self, msg="non-invertible"):
        super().__init__(msg)


class DecodeError(ThreshPetError, ValueError):
    pass


class DegenerateKeyError(ThreshPetError):
    def __init__(self, msg="degenerate key"):
        super().__init__(msg)


class AuthenticationError(ThreshPetError):
    def __init__(self, msg="authentication failure"):
        super().__init__(msg)


class InsufficientSharesError(ThreshPetError):
    def __init__(self, msg="insufficient shares"):
        super().__init__(msg)


class CeremonyError(ThreshPetError):
    """Key generation could not complete; ``culprits`` lists rabbit indices."""

    def __init__(self, msg, culprits=()):
        super().__init__(msg)
        self.culprits = sorted(set(culprits))


class FragmentVerificationError(ThreshPetError):
    def __init__(self, msg="fragment verification failed"):
        super().__init__(msg)


class MPCError(ThreshPetError):
    pass


class TripleReuseError(MPCError):
    def __init__(self, msg="triple reuse"):
        super().__init__(msg)


class InsufficientParticipantsError(MPCError):
    def __init__(self, msg="insufficient participants"):
        super().__init__(msg)


class SessionMismatchError(MPCError):
    def __init__(self, msg="mismatched session id"):
        super().__init__(msg)


class InsufficientTriplesError(MPCError):
    def __init__(self, msg="insufficient triples"):
        super().__init__(msg)


class ProtocolRejection(ThreshPetError):
    """The protocol refused an action (as opposed to a malformed call)."""


class ExpiredError(ProtocolRejection):
    def __init__(self, msg="expired"):
        super().__init__(msg)


class AlreadyTriggeredError(ProtocolRejection):
    def __init__(self, msg="already triggered"):
        super().__init__(msg)


class NotTriggeredError(ProtocolRejection):
    def __init__(self, msg="not triggered"):
        super().__init__(msg)


class DuplicateUserError(ProtocolRejection):
    def __init__(self, msg="duplicate user"):
        super().__init__(msg)


class InsufficientValidationsError(ProtocolRejection):
    def __init__(self, msg="insufficient validations"):
        super().__init__(msg)


class FragmentReleasedError(ProtocolRejection):
    def __init__(self, msg="fragment already released"):
        super().__init__(msg)


class MalformedRecordError(ProtocolRejection):
    pass


class ShareInconsistencyError(ProtocolRejection):
    def __init__(self, msg="share inconsistency"):
        super().__init__(msg)


class SessionError(ProtocolRejection):
    """Signing-session failures: unknown petition, bad preimage, etc."""


class VerificationError(ThreshPetError):
    """A chain or transcript failed public verification."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems) or "verification failed")
