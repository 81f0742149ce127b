"""Exception types shared across the simulator."""


class GuaranteeError(Exception):
    """Base class for every error raised by the governance machinery."""


# --- identity / sealing ---

class IdentityWiped(GuaranteeError):
    """Secret key material is gone; the device can no longer sign or open."""


class WrongRecipient(GuaranteeError):
    """A sealed blob was offered to a device it was not sealed for."""


class DecryptionFailure(GuaranteeError):
    """Ciphertext failed authenticated decryption (corrupted or forged)."""


# --- receipts / claims ---

class UnknownParent(GuaranteeError):
    """A receipt references a parent that is neither stored nor a declared root."""


class CycleDetected(GuaranteeError):
    """Inserting the receipt would make the provenance graph cyclic."""


class UnknownReceipt(GuaranteeError):
    """The referenced receipt id is not present in the graph."""


class ThresholdExceeded(GuaranteeError):
    """The aggregate is not below the requested bound; the claim is refused."""


class ClaimRefused(GuaranteeError):
    """The requested claim contradicts the underlying records."""


class AccountingGap(GuaranteeError):
    """Receipts plus idle records do not add up to the declared capacity."""

    def __init__(self, gap: int, message: str = ""):
        self.gap = gap
        super().__init__(message or f"unaccounted compute: {gap} FLOP")


class UnknownDevice(GuaranteeError):
    """A device id or name is not known to the registry."""


# --- policy ---

class RulesetExpired(GuaranteeError):
    """A non-baseline ruleset was consulted past its expiry."""


class InsufficientQuorum(GuaranteeError):
    """Fewer distinct valid signatures than the configured threshold."""


class VersionRollback(GuaranteeError):
    """An update carries a version not greater than the installed one."""


class BadSignature(GuaranteeError):
    """A signature attributed to a known key fails verification."""


class InvalidExpiry(GuaranteeError):
    """A commitment or license window is empty or already in the past."""


class CommitmentActive(GuaranteeError):
    """A binding ruleset cannot be removed or replaced before its expiry."""


class LogGap(GuaranteeError):
    """An issuer log hash chain is broken; non-issuance cannot be certified."""


# --- device ---

class Denied(GuaranteeError):
    """A workload was refused by rule evaluation.

    Carries the id of the first violated rule in declared order.
    """

    def __init__(self, rule_id: str, reason: str = ""):
        self.rule_id = rule_id
        self.reason = reason
        super().__init__(reason or f"denied by rule {rule_id}")


class Tampered(GuaranteeError):
    """The enclosure tamper response has fired; the device refuses everything."""


class UnknownModel(GuaranteeError):
    """The referenced model result is not in the device's receipt graph."""


class UnapprovedRecipient(GuaranteeError):
    """Deployment target is outside the rule's approved device set."""


class MissingSafeguardTag(GuaranteeError):
    """Deployment lacks a safeguard tag the active rule requires."""


# --- network ---

class Timeout(GuaranteeError):
    """No response: link severed, responder wiped, or ping refused."""


class BadEcho(GuaranteeError):
    """A ping echo carried a bad signature or the wrong nonce."""


class MemberUnreachable(GuaranteeError):
    """Cluster formation failed: some member pair has no usable link."""


class MemberTampered(GuaranteeError):
    """Cluster formation or validation hit a wiped or bricked member."""


class StaleAttestation(GuaranteeError):
    """A cluster config's member attestations are no longer current."""


class EgressExceeded(GuaranteeError):
    """A send would push cluster-boundary traffic past its bandwidth cap."""


# --- scenario / cli ---

class ParseError(GuaranteeError):
    """A scenario, claim, or trust-roots file failed to parse or validate."""


class UnknownReference(GuaranteeError):
    """A scenario event references an undeclared device, label, or authority."""
