"""In-process hash-chained ledger with signed transactions.

One block is sealed per protocol round by a rotating leader (consensus is
simulated; every submission passes through this single serialized
component). The genesis block records each party's verification key and
initial token grant. Gradient sales run as purchase_order / fulfillment
transaction pairs: the order escrows the offered tokens and carries the
buyer's encryption key, the fulfillment publishes an encrypted payload to
a content-addressed store and records its hash plus a pointer back to the
order, at which point the escrow moves to the seller. Unfulfilled orders
are refunded when the round's block is sealed.

Primitives are real, not stubs: Ed25519 signatures, SHA-256 chaining, and
a hybrid envelope (fresh AES-256-GCM key per payload, wrapped for the
recipient via ephemeral X25519 + HKDF + AES-GCM).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np
from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.hashes import SHA256
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .numerics import SparseUpdate
from .credibility import TokenAccount, settle_tokens

TRANSACTION_KINDS = ("register", "purchase_order", "fulfillment", "punishment", "token_transfer")

_WRAP_INFO = b"faircollab payload key wrap"


class LedgerError(RuntimeError):
    pass


def sha256_hex(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


class KeyPair:
    """Signing keys (Ed25519) plus encryption keys (X25519) for one party."""

    def __init__(self, signing_key: Ed25519PrivateKey, decryption_key: X25519PrivateKey):
        self.signing_key = signing_key
        self.decryption_key = decryption_key

    @classmethod
    def generate(cls, rng: np.random.Generator) -> "KeyPair":
        # Derived from the party's seeded stream so runs are reproducible.
        return cls(Ed25519PrivateKey.from_private_bytes(rng.bytes(32)),
                   X25519PrivateKey.from_private_bytes(rng.bytes(32)))

    @property
    def verify_key_hex(self) -> str:
        return self.signing_key.public_key().public_bytes_raw().hex()

    @property
    def encrypt_key_hex(self) -> str:
        return self.decryption_key.public_key().public_bytes_raw().hex()

    def sign(self, message: bytes) -> str:
        return self.signing_key.sign(message).hex()


def verify_signature(verify_key_hex: str, message: bytes, signature_hex: str) -> bool:
    try:
        key = Ed25519PublicKey.from_public_bytes(bytes.fromhex(verify_key_hex))
        key.verify(bytes.fromhex(signature_hex), message)
        return True
    except (InvalidSignature, ValueError):
        return False


@dataclass(frozen=True)
class Transaction:
    kind: str
    payload: dict
    author: str
    signature: str

    def __post_init__(self):
        if self.kind not in TRANSACTION_KINDS:
            raise ValueError(f"unknown transaction kind {self.kind!r}")

    @staticmethod
    def signing_bytes(kind: str, payload: dict, author: str) -> bytes:
        return _canonical({"kind": kind, "payload": payload, "author": author})

    @classmethod
    def signed(cls, kind: str, payload: dict, author: str, keypair: KeyPair) -> "Transaction":
        return cls(kind, payload, author, keypair.sign(cls.signing_bytes(kind, payload, author)))

    @property
    def tx_id(self) -> str:
        return sha256_hex(_canonical(self.to_dict()))[:24]

    def to_dict(self) -> dict:
        return {"kind": self.kind, "payload": self.payload,
                "author": self.author, "signature": self.signature}

    @classmethod
    def from_dict(cls, obj: dict) -> "Transaction":
        return cls(obj["kind"], obj["payload"], obj["author"], obj["signature"])


@dataclass(frozen=True)
class Block:
    index: int
    prev_hash: str
    transactions: tuple
    leader: str
    block_hash: str = ""

    @staticmethod
    def compute_hash(index: int, prev_hash: str, transactions, leader: str) -> str:
        body = _canonical({
            "index": index,
            "prev_hash": prev_hash,
            "leader": leader,
            "transactions": [tx.to_dict() for tx in transactions],
        })
        return sha256_hex(body)

    @classmethod
    def sealed(cls, index: int, prev_hash: str, transactions, leader: str) -> "Block":
        txs = tuple(transactions)
        return cls(index, prev_hash, txs, leader,
                   cls.compute_hash(index, prev_hash, txs, leader))

    def to_dict(self) -> dict:
        return {"index": self.index, "prev_hash": self.prev_hash, "leader": self.leader,
                "transactions": [tx.to_dict() for tx in self.transactions],
                "block_hash": self.block_hash}

    @classmethod
    def from_dict(cls, obj: dict) -> "Block":
        return cls(obj["index"], obj["prev_hash"],
                   tuple(Transaction.from_dict(t) for t in obj["transactions"]),
                   obj["leader"], obj["block_hash"])


@dataclass(frozen=True)
class EncryptedPayload:
    """Hybrid envelope: AES-GCM ciphertext under a fresh symmetric key,
    that key wrapped for the recipient via ephemeral X25519 + HKDF."""

    ciphertext: bytes
    nonce: bytes
    wrapped_key: bytes
    wrap_nonce: bytes
    ephemeral_public: bytes

    @property
    def payload_hash(self) -> str:
        return sha256_hex(self.ciphertext)

    def to_dict(self) -> dict:
        return {"ciphertext": self.ciphertext.hex(), "nonce": self.nonce.hex(),
                "wrapped_key": self.wrapped_key.hex(), "wrap_nonce": self.wrap_nonce.hex(),
                "ephemeral_public": self.ephemeral_public.hex()}

    @classmethod
    def from_dict(cls, obj: dict) -> "EncryptedPayload":
        return cls(*(bytes.fromhex(obj[k]) for k in
                     ("ciphertext", "nonce", "wrapped_key", "wrap_nonce", "ephemeral_public")))


def _wrap_key_for(recipient_pk_hex: str, fsk: bytes, rng: np.random.Generator) -> tuple[bytes, bytes, bytes]:
    ephemeral = X25519PrivateKey.from_private_bytes(rng.bytes(32))
    shared = ephemeral.exchange(X25519PublicKey.from_public_bytes(bytes.fromhex(recipient_pk_hex)))
    kek = HKDF(algorithm=SHA256(), length=32, salt=None, info=_WRAP_INFO).derive(shared)
    wrap_nonce = rng.bytes(12)
    wrapped = AESGCM(kek).encrypt(wrap_nonce, fsk, None)
    return wrapped, wrap_nonce, ephemeral.public_key().public_bytes_raw()


def encrypt_payload(plaintext: bytes, recipient_pk_hex: str, rng: np.random.Generator,
                    aad: bytes = b"") -> tuple[EncryptedPayload, bytes, bytes]:
    """Returns (payload, fsk, nonce); fsk and nonce stay with the sender
    for later audit reveals."""
    fsk = rng.bytes(32)
    nonce = rng.bytes(12)
    ciphertext = AESGCM(fsk).encrypt(nonce, plaintext, aad)
    wrapped, wrap_nonce, eph_pub = _wrap_key_for(recipient_pk_hex, fsk, rng)
    return EncryptedPayload(ciphertext, nonce, wrapped, wrap_nonce, eph_pub), fsk, nonce


def decrypt_payload(payload: EncryptedPayload, keypair: KeyPair, aad: bytes = b"") -> bytes:
    shared = keypair.decryption_key.exchange(
        X25519PublicKey.from_public_bytes(payload.ephemeral_public))
    kek = HKDF(algorithm=SHA256(), length=32, salt=None, info=_WRAP_INFO).derive(shared)
    fsk = AESGCM(kek).decrypt(payload.wrap_nonce, payload.wrapped_key, None)
    return AESGCM(fsk).decrypt(payload.nonce, payload.ciphertext, aad)


@dataclass
class Order:
    order_id: str
    buyer: str
    seller: str
    count: int
    offered: int
    buyer_encrypt_key: str
    round_index: int
    status: str = "open"  # open | fulfilled | expired


@dataclass
class RevealedShipment:
    """Seller-side evidence for dispute audits."""

    plaintext: bytes
    fsk: bytes
    nonce: bytes


class Ledger:
    """Serialized ledger facade: token accounts, escrow, payload store,
    and the block chain itself."""

    def __init__(self, fine_factor: float = 1.0):
        self.chain: list[Block] = []
        self.pending: list[Transaction] = []
        self.accounts: dict[str, TokenAccount] = {}
        self.verify_keys: dict[str, str] = {}
        self.escrow: dict[str, int] = {}
        self.orders: dict[str, Order] = {}
        self.payload_store: dict[str, EncryptedPayload] = {}
        self.fine_factor = fine_factor
        self.round_index = 0

    # -- genesis ------------------------------------------------------

    def create_genesis(self, registrations, keypairs: dict[str, KeyPair],
                       extra_transactions=()) -> Block:
        """registrations: iterable of (party_id, verify_key_hex, tokens)."""
        registrations = list(registrations)
        if len(registrations) < 2:
            raise LedgerError("genesis needs at least 2 registrations")
        seen = set()
        txs = []
        for party_id, verify_key_hex, tokens in registrations:
            if party_id in seen:
                raise LedgerError(f"duplicate party id {party_id!r}")
            seen.add(party_id)
            payload = {"party": party_id, "verify_key": verify_key_hex, "tokens": int(tokens)}
            txs.append(Transaction.signed("register", payload, party_id, keypairs[party_id]))
            self.verify_keys[party_id] = verify_key_hex
            self.accounts[party_id] = TokenAccount(party_id, int(tokens))
        txs.extend(extra_transactions)
        genesis = Block.sealed(0, "0" * 64, txs, registrations[0][0])
        self.chain.append(genesis)
        self.round_index = 1
        return genesis

    def register_party(self, party_id: str, keypair: KeyPair, tokens: int) -> Transaction:
        """Late registration (a party joining after genesis). The caller
        restarts the credibility initialisation; the registration itself
        lands in the next sealed block."""
        if party_id in self.accounts:
            raise LedgerError(f"party {party_id!r} already registered")
        payload = {"party": party_id, "verify_key": keypair.verify_key_hex,
                   "tokens": int(tokens)}
        tx = Transaction.signed("register", payload, party_id, keypair)
        self.verify_keys[party_id] = keypair.verify_key_hex
        self.accounts[party_id] = TokenAccount(party_id, int(tokens))
        self.pending.append(tx)
        return tx

    # -- trading ------------------------------------------------------

    def balance(self, party_id: str) -> int:
        return self.accounts[party_id].balance

    def total_tokens(self) -> int:
        return sum(acct.balance for acct in self.accounts.values()) + sum(self.escrow.values())

    def submit_purchase_order(self, buyer_keypair: KeyPair, buyer: str, seller: str,
                              count: int, offered_tokens: int,
                              buyer_encrypt_key_hex: str) -> Transaction:
        if count < 1:
            raise LedgerError("order must request at least one gradient")
        if offered_tokens < count:
            raise LedgerError("one token per gradient: offer covers the count")
        account = self.accounts[buyer]
        if account.balance < offered_tokens:
            raise LedgerError(f"{buyer} cannot escrow {offered_tokens} tokens")
        payload = {"buyer": buyer, "seller": seller, "count": int(count),
                   "offered": int(offered_tokens), "encrypt_key": buyer_encrypt_key_hex,
                   "round": self.round_index}
        tx = Transaction.signed("purchase_order", payload, buyer, buyer_keypair)
        account.balance -= offered_tokens
        self.escrow[tx.tx_id] = offered_tokens
        self.orders[tx.tx_id] = Order(tx.tx_id, buyer, seller, count, offered_tokens,
                                      buyer_encrypt_key_hex, self.round_index)
        self.pending.append(tx)
        return tx

    def fulfill_order(self, seller_keypair: KeyPair, seller: str, order_id: str,
                      update: SparseUpdate, rng: np.random.Generator
                      ) -> tuple[Transaction, EncryptedPayload, RevealedShipment]:
        """Ship an order. Returns the transaction, the published payload,
        and the reveal material (plaintext, fsk, nonce) the seller keeps
        for later dispute audits."""
        order = self.orders.get(order_id)
        if order is None:
            raise LedgerError(f"no such order {order_id}")
        if order.status != "open":
            raise LedgerError(f"order {order_id} is {order.status}")
        if order.seller != seller:
            raise LedgerError(f"order {order_id} is not addressed to {seller}")
        if len(update) != order.count:
            raise LedgerError(f"order wants {order.count} gradients, got {len(update)}")
        plaintext = update.to_bytes()
        payload_obj, fsk, nonce = encrypt_payload(
            plaintext, order.buyer_encrypt_key, rng, aad=order_id.encode())
        self.payload_store[payload_obj.payload_hash] = payload_obj
        tx_payload = {"order": order_id, "payload_hash": payload_obj.payload_hash,
                      "seller": seller, "round": self.round_index}
        tx = Transaction.signed("fulfillment", tx_payload, seller, seller_keypair)
        self.pending.append(tx)
        order.status = "fulfilled"
        amount = self.escrow.pop(order_id)
        self.accounts[seller].balance += amount
        return tx, payload_obj, RevealedShipment(plaintext, fsk, nonce)

    def transfer_tokens(self, keypair: KeyPair, sender: str, recipient: str,
                        amount: int, note: str = "") -> Transaction:
        settle_tokens(self.accounts[sender], self.accounts[recipient], amount)
        payload = {"from": sender, "to": recipient, "amount": int(amount),
                   "note": note, "round": self.round_index}
        tx = Transaction.signed("token_transfer", payload, sender, keypair)
        self.pending.append(tx)
        return tx

    def record_punishment(self, keypair: KeyPair, author: str, against: str,
                          reason: str, fine: int = 0, order_id: str | None = None) -> Transaction:
        payload = {"against": against, "reason": reason, "fine": int(fine),
                   "order": order_id, "round": self.round_index}
        tx = Transaction.signed("punishment", payload, author, keypair)
        self.pending.append(tx)
        return tx

    def audit_and_punish(self, accuser: str, accuser_keypair: KeyPair, order_id: str,
                         revealed: RevealedShipment) -> Transaction:
        """Settle a delivery dispute from the seller's revealed shipment.

        Re-encrypting the revealed plaintext under the recorded parameters
        must reproduce the payload hash committed in the fulfillment, and
        the plaintext must decode to a well-formed update of the ordered
        size. A match convicts the buyer of a false accusation; a mismatch
        convicts the seller. The fine moves to the wronged side, capped at
        the cheater's balance.
        """
        order = self.orders.get(order_id)
        if order is None or order.status != "fulfilled":
            raise LedgerError("audit requires a fulfilled order")
        recorded_hash = None
        for block in self.chain:
            for tx in block.transactions:
                if tx.kind == "fulfillment" and tx.payload.get("order") == order_id:
                    recorded_hash = tx.payload["payload_hash"]
        for tx in self.pending:
            if tx.kind == "fulfillment" and tx.payload.get("order") == order_id:
                recorded_hash = tx.payload["payload_hash"]
        if recorded_hash is None:
            raise LedgerError("no fulfillment record for order")

        valid = False
        try:
            recomputed = AESGCM(revealed.fsk).encrypt(
                revealed.nonce, revealed.plaintext, order_id.encode())
            if sha256_hex(recomputed) == recorded_hash:
                update = SparseUpdate.from_bytes(revealed.plaintext)
                valid = len(update) == order.count
        except (ValueError, OverflowError):
            valid = False

        cheater, wronged = (order.buyer, order.seller) if valid else (order.seller, order.buyer)
        fine = min(int(round(self.fine_factor * order.count)), self.accounts[cheater].balance)
        if fine > 0:
            settle_tokens(self.accounts[cheater], self.accounts[wronged], fine)
        return self.record_punishment(accuser_keypair, accuser, cheater,
                                      "delivery dispute", fine, order_id)

    # -- rounds -------------------------------------------------------

    def expire_open_orders(self) -> None:
        """Refund escrow of every unfulfilled order (called at round seal)."""
        for order_id, order in list(self.orders.items()):
            if order.status == "open" and order_id in self.escrow:
                self.accounts[order.buyer].balance += self.escrow.pop(order_id)
                order.status = "expired"

    def seal_block(self, leader: str) -> Block:
        self.expire_open_orders()
        prev = self.chain[-1].block_hash if self.chain else "0" * 64
        block = Block.sealed(len(self.chain), prev, self.pending, leader)
        self.chain.append(block)
        self.pending = []
        self.round_index += 1
        return block


def verify_chain(chain) -> bool:
    """True iff hashes link from genesis and every signature verifies
    against the key registered for its author."""
    if not chain:
        return False
    verify_keys: dict[str, str] = {}
    prev_hash = "0" * 64
    for position, block in enumerate(chain):
        if block.index != position or block.prev_hash != prev_hash:
            return False
        # Registrations must be bound before their signatures can be checked.
        for tx in block.transactions:
            if tx.kind == "register":
                party = tx.payload.get("party")
                key = tx.payload.get("verify_key")
                if party is None or key is None or tx.author != party:
                    return False
                if party in verify_keys and verify_keys[party] != key:
                    return False
                verify_keys[party] = key
        for tx in block.transactions:
            key = verify_keys.get(tx.author)
            if key is None:
                return False
            if not verify_signature(key, Transaction.signing_bytes(
                    tx.kind, tx.payload, tx.author), tx.signature):
                return False
        if Block.compute_hash(block.index, block.prev_hash,
                              block.transactions, block.leader) != block.block_hash:
            return False
        prev_hash = block.block_hash
    return True


def dump_chain(chain, path) -> None:
    """One block per line as canonical JSON."""
    with open(path, "w") as fh:
        for block in chain:
            fh.write(json.dumps(block.to_dict(), sort_keys=True, separators=(",", ":")))
            fh.write("\n")


def load_chain(path) -> list[Block]:
    blocks = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                blocks.append(Block.from_dict(json.loads(line)))
    return blocks


def dump_payload_store(store: dict[str, EncryptedPayload], directory) -> None:
    """Content-addressed files named by payload hash."""
    import os
    os.makedirs(directory, exist_ok=True)
    for payload_hash, payload in store.items():
        with open(os.path.join(directory, f"{payload_hash}.json"), "w") as fh:
            json.dump(payload.to_dict(), fh, sort_keys=True)
