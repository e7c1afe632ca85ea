"""Exception hierarchy shared by every module.

Every error carries a short machine ``code``; the wire layer turns it into an
``error{code, detail}`` envelope and the CLI prints it.
"""

from __future__ import annotations


class FedblindError(Exception):
    code = "internal"


# arithmetic / encoding
class InvalidBits(FedblindError, ValueError):
    code = "invalid_bits"


class ZeroModulus(FedblindError, ValueError):
    code = "zero_modulus"


class NotInvertible(FedblindError, ValueError):
    code = "not_invertible"


class ValueTooLarge(FedblindError, ValueError):
    code = "value_too_large"


class InvalidKey(FedblindError, ValueError):
    code = "invalid_key"


class BadHex(FedblindError, ValueError):
    code = "bad_hex"


# OPRF engine
class InputNotUnit(FedblindError, ValueError):
    code = "input_not_unit"


class OutOfRange(FedblindError, ValueError):
    code = "out_of_range"


# credentials
class StaleNonce(FedblindError):
    code = "stale_nonce"


# registry
class AlreadyRegistered(FedblindError):
    code = "already_registered"


class AlarmLocked(FedblindError):
    code = "alarm_locked"


class CorruptLog(FedblindError):
    code = "corrupt_log"


# protocol
class ProtocolRejection(FedblindError):
    """A protocol step refused the request; CLI maps these to exit code 1."""

    code = "rejected"


class KycFailed(ProtocolRejection):
    code = "kyc_failed"


class ProofOfPossessionFailed(ProtocolRejection):
    code = "proof_of_possession_failed"


class InvalidToken(ProtocolRejection):
    code = "invalid_token"


class RegistryConflict(ProtocolRejection):
    code = "already_registered"

    def __init__(self, code: str = "already_registered", detail: str = ""):
        super().__init__(detail or code)
        self.code = code


class PeerUnavailable(ProtocolRejection):
    code = "peer_unavailable"


class DuplicateDetected(ProtocolRejection):
    code = "duplicate_detected"

    def __init__(self, matched_pid: int):
        super().__init__("identity already registered in another domain")
        self.matched_pid = matched_pid


class DuplicateIdpId(FedblindError):
    code = "duplicate_idp_id"


class UnknownIdp(FedblindError):
    code = "unknown_idp"


class UnexpectedMessage(FedblindError):
    code = "unexpected_message"


class RemoteError(FedblindError):
    """An error envelope received from another role, re-raised locally."""

    def __init__(self, code: str, detail: str = ""):
        super().__init__(detail or code)
        self.code = code


class OutOfPhase(FedblindError):
    code = "out_of_phase"


class UnknownSession(FedblindError):
    code = "unknown_session"


# wire
class WireError(FedblindError):
    code = "wire_error"


class MalformedFrame(WireError):
    code = "malformed_frame"


class UnknownField(MalformedFrame):
    code = "unknown_field"


class UnknownType(WireError):
    code = "unknown_type"


class BindFailure(FedblindError):
    code = "bind_failure"


class ConfigError(FedblindError):
    code = "config_error"


# harness
class UnknownScenario(FedblindError, ValueError):
    code = "unknown_scenario"
