"""Device identities: signing, sealed delivery, and tamper-wipe key destruction.

Each identity is derived deterministically from a 32-byte seed and carries
two keypairs: an Ed25519 signing key and an X25519 key-agreement key. The
public half of both is concatenated into `public_key`, and the device id is
the SHA-256 digest of that concatenation, so identifiers are self-certifying
and any verifier can recompute them.

Sealing uses an ephemeral X25519 exchange against the recipient's agreement
key plus ChaCha20-Poly1305. The ephemeral key is derived from the sender's
secret, the recipient key, and the payload digest, which keeps the whole
construction deterministic for reproducible runs without ever reusing a
(key, nonce) pair across distinct payloads.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass, field
from enum import Enum

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305
from cryptography.hazmat.primitives.serialization import (
    Encoding,
    PublicFormat,
)

from .encoding import blob, digest, u64
from .errors import DecryptionFailure, IdentityWiped, WrongRecipient

SEED_LEN = 32
KEY_LEN = 32
PUBLIC_KEY_LEN = 2 * KEY_LEN   # signing key || agreement key

_SIGN_DOMAIN = b"hegsim/sign/v1:"
_ATT_DOMAIN = b"hegsim/attest/v1:"
_SEAL_KEY_DOMAIN = b"hegsim/seal-key/v1:"
_EPH_DOMAIN = b"hegsim/seal-eph/v1:"


class LifeState(str, Enum):
    ACTIVE = "active"
    WIPED = "wiped"
    BRICKED = "bricked"


@dataclass
class DeviceIdentity:
    """A device's keys plus its one-way life state.

    `secret_key` is present only while the state is ACTIVE; wiping destroys
    it irreversibly. The public half survives so that previously issued
    signatures stay verifiable.
    """

    device_id: bytes
    public_key: bytes
    life_state: LifeState = LifeState.ACTIVE
    _signing_secret: bytes | None = field(default=None, repr=False)
    _agreement_secret: bytes | None = field(default=None, repr=False)

    @property
    def secret_key(self) -> bytes | None:
        return self._signing_secret

    @property
    def verify_key(self) -> bytes:
        return self.public_key[:KEY_LEN]

    @property
    def agreement_key(self) -> bytes:
        return self.public_key[KEY_LEN:]

    def require_active(self) -> None:
        if self.life_state is not LifeState.ACTIVE:
            raise IdentityWiped(
                f"device {self.device_id.hex()[:12]} is {self.life_state.value}"
            )


@dataclass(frozen=True)
class Attestation:
    """A signature binding a payload to a signer at a simulated instant."""

    payload: bytes
    signer: bytes
    signature: bytes
    issued_at: int

    def signed_message(self) -> bytes:
        return _ATT_DOMAIN + blob(self.payload) + u64(self.issued_at)


@dataclass(frozen=True)
class SealedBlob:
    """Ciphertext that only the named recipient device can open."""

    recipient: bytes
    ciphertext: bytes
    sender_attestation: Attestation


def _raw_public(key) -> bytes:
    return key.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)


def generate_identity(seed: bytes) -> DeviceIdentity:
    """Derive a fresh identity from a 32-byte seed. Same seed, same identity."""
    if len(seed) != SEED_LEN:
        raise ValueError(f"seed must be {SEED_LEN} bytes, got {len(seed)}")
    signing_secret = digest(b"hegsim/seed-sign:" + seed)
    agreement_secret = digest(b"hegsim/seed-seal:" + seed)
    public = (
        _raw_public(Ed25519PrivateKey.from_private_bytes(signing_secret))
        + _raw_public(X25519PrivateKey.from_private_bytes(agreement_secret))
    )
    return DeviceIdentity(
        device_id=digest(public),
        public_key=public,
        life_state=LifeState.ACTIVE,
        _signing_secret=signing_secret,
        _agreement_secret=agreement_secret,
    )


def device_id_for(public_key: bytes) -> bytes:
    return digest(public_key)


def sign_raw(identity: DeviceIdentity, message: bytes) -> bytes:
    identity.require_active()
    key = Ed25519PrivateKey.from_private_bytes(identity._signing_secret)
    return key.sign(_SIGN_DOMAIN + message)


@functools.lru_cache(maxsize=16384)
def _verify_cached(verify_key: bytes, message: bytes, signature: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(verify_key).verify(
            signature, _SIGN_DOMAIN + message
        )
        return True
    except InvalidSignature:
        return False


def verify_raw(public_key: bytes, message: bytes, signature: bytes) -> bool:
    return _verify_cached(public_key[:KEY_LEN], message, signature)


def sign(identity: DeviceIdentity, payload: bytes, now: int) -> Attestation:
    """Produce an attestation over `payload` at simulated time `now` (ms)."""
    signature = sign_raw(identity, _ATT_DOMAIN + blob(payload) + u64(now))
    return Attestation(
        payload=payload,
        signer=identity.device_id,
        signature=signature,
        issued_at=now,
    )


def verify_attestation(attestation: Attestation, public_key: bytes) -> bool:
    """Check an attestation against the signer's public key.

    Also binds the key to the claimed signer id, since ids are digests of
    public keys.
    """
    if device_id_for(public_key) != attestation.signer:
        return False
    return verify_raw(
        public_key, attestation.signed_message(), attestation.signature
    )


def _seal_key(shared: bytes, ephemeral_public: bytes, recipient_agreement: bytes) -> bytes:
    return digest(_SEAL_KEY_DOMAIN + shared + ephemeral_public + recipient_agreement)


def seal_to(
    recipient_public_key: bytes,
    payload: bytes,
    sender: DeviceIdentity,
    now: int = 0,
) -> SealedBlob:
    """Encrypt `payload` so that only the holder of `recipient_public_key`
    can recover it, and attest the ciphertext digest as `sender`."""
    sender.require_active()
    if len(recipient_public_key) != PUBLIC_KEY_LEN:
        raise ValueError("recipient public key must be 64 bytes")
    recipient_agreement = recipient_public_key[KEY_LEN:]
    recipient_id = device_id_for(recipient_public_key)

    ephemeral_secret = digest(
        _EPH_DOMAIN
        + sender._agreement_secret
        + recipient_public_key
        + digest(payload)
    )
    ephemeral = X25519PrivateKey.from_private_bytes(ephemeral_secret)
    ephemeral_public = _raw_public(ephemeral)
    shared = ephemeral.exchange(
        X25519PublicKey.from_public_bytes(recipient_agreement)
    )
    key = _seal_key(shared, ephemeral_public, recipient_agreement)
    nonce = digest(b"hegsim/seal-nonce/v1:" + key)[:12]
    sealed = ChaCha20Poly1305(key).encrypt(nonce, payload, recipient_id)
    ciphertext = ephemeral_public + sealed
    return SealedBlob(
        recipient=recipient_id,
        ciphertext=ciphertext,
        sender_attestation=sign(sender, digest(ciphertext), now),
    )


def open_sealed(blob_in: SealedBlob, identity: DeviceIdentity) -> bytes:
    """Recover the payload of a blob sealed to this identity."""
    if blob_in.recipient != identity.device_id:
        raise WrongRecipient(
            f"blob sealed to {blob_in.recipient.hex()[:12]}, "
            f"offered to {identity.device_id.hex()[:12]}"
        )
    identity.require_active()
    if len(blob_in.ciphertext) < KEY_LEN + 16:
        raise DecryptionFailure("ciphertext too short")
    ephemeral_public = blob_in.ciphertext[:KEY_LEN]
    sealed = blob_in.ciphertext[KEY_LEN:]
    secret = X25519PrivateKey.from_private_bytes(identity._agreement_secret)
    shared = secret.exchange(X25519PublicKey.from_public_bytes(ephemeral_public))
    key = _seal_key(shared, ephemeral_public, identity.agreement_key)
    nonce = digest(b"hegsim/seal-nonce/v1:" + key)[:12]
    try:
        return ChaCha20Poly1305(key).decrypt(nonce, sealed, identity.device_id)
    except InvalidTag as exc:
        raise DecryptionFailure("authenticated decryption failed") from exc


def verify_sealed_sender(blob_in: SealedBlob, sender_public_key: bytes) -> bool:
    """Check that the blob's ciphertext was attested by the claimed sender."""
    att = blob_in.sender_attestation
    if att.payload != digest(blob_in.ciphertext):
        return False
    return verify_attestation(att, sender_public_key)


def wipe(identity: DeviceIdentity, brick: bool = False) -> DeviceIdentity:
    """Destroy secret material. `brick` also renders the device permanently
    inoperable. Idempotent; life state only ever moves forward."""
    identity._signing_secret = None
    identity._agreement_secret = None
    if brick:
        identity.life_state = LifeState.BRICKED
    elif identity.life_state is LifeState.ACTIVE:
        identity.life_state = LifeState.WIPED
    return identity


# Wire helpers for sealed blobs (ciphertext plus sender attestation).

def encode_sealed_blob(blob_in: SealedBlob) -> bytes:
    att = blob_in.sender_attestation
    return (
        blob(blob_in.recipient)
        + blob(blob_in.ciphertext)
        + blob(att.payload)
        + blob(att.signer)
        + blob(att.signature)
        + u64(att.issued_at)
    )


def decode_sealed_blob(data: bytes) -> SealedBlob:
    from .encoding import read_blob, read_u64

    recipient, off = read_blob(data, 0)
    ciphertext, off = read_blob(data, off)
    payload, off = read_blob(data, off)
    signer, off = read_blob(data, off)
    signature, off = read_blob(data, off)
    issued_at, off = read_u64(data, off)
    if off != len(data):
        raise ValueError("trailing bytes after sealed blob")
    return SealedBlob(
        recipient=recipient,
        ciphertext=ciphertext,
        sender_attestation=Attestation(
            payload=payload, signer=signer, signature=signature, issued_at=issued_at
        ),
    )
