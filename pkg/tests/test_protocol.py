import base64
import dataclasses
import json
import random
import struct
from unittest import TestCase

import numpy as np
import pytest

from fedlora.errors import FedConnectionError, FedLoraError, FramingError, ProtocolError, RoundFailureError
from fedlora.fedproto import (
    ClientFaults,
    InProcessListener,
    Message,
    MessageKind,
    RoundPhase,
    RoundState,
    SocketListener,
    decode,
    encode,
    load_adapters,
    quantize,
    save_adapters,
    save_frame,
    simulate,
    update_from_message,
)
from fedlora.fedproto.messages import frame_length, round_start_message, update_message
from fedlora.identity import ClientIdentity, KeyRegistry, verify_update
from fedlora.lora_model import AdapterSet

from .utils import random_pair, require_socket, tiny_task


def _frame(header: bytes, payload: bytes = b"") -> bytes:
    body = struct.pack(">I", len(header)) + header + payload
    return struct.pack(">I", len(body)) + body


def _adapters(seed=0, alpha=4.0):
    return AdapterSet.from_pairs(
        [random_pair("q", 4, 4, rank=2, seed=seed, alpha=alpha), random_pair("up", 8, 4, rank=2, seed=seed + 1, alpha=alpha)]
    )


class TestFraming(TestCase):
    def test_shutdown_frame_layout(self):
        data = encode(Message(MessageKind.SHUTDOWN, 3, -1))
        header = b'{"kind":"SHUTDOWN","round":3,"sender_id":-1}'
        self.assertEqual(data, _frame(header))
        self.assertEqual(len(data), 8 + len(header))

    def test_payload_size_follows_manifest(self):
        header = {
            "n_k": 5,
            "signature": "",
            "tensor_manifest": [{"target": "q", "which": "A", "rows": 2, "cols": 3}],
        }
        msg = decode(encode(Message(MessageKind.UPDATE, 1, 0, header=header, tensor_payload=bytes(24))))
        self.assertEqual(len(msg.tensor_payload), 24)
        with self.assertRaises(FramingError):
            Message(MessageKind.UPDATE, 1, 0, header=header, tensor_payload=bytes(20))

    def test_round_trip(self):
        msg = Message(MessageKind.UPDATE_ACK, 2, -1, header={"accepted": False, "reason": "duplicate"})
        self.assertEqual(decode(encode(msg)), msg)

    def test_truncated(self):
        data = encode(round_start_message(1, _adapters()))
        for cut in (1, 5, len(data) - 1):
            with self.assertRaises(FramingError):
                decode(data[:cut])
        with self.assertRaises(FramingError):
            decode(data + b"\x00")

    def test_oversized_prefix(self):
        with self.assertRaises(FramingError):
            frame_length(struct.pack(">I", 2**31))

    def test_unknown_kind(self):
        with self.assertRaises(ProtocolError):
            decode(_frame(b'{"kind":"HELLO","round":0,"sender_id":0}'))

    def test_missing_keys(self):
        with self.assertRaises(ProtocolError):
            decode(_frame(b'{"kind":"SHUTDOWN","round":0}'))
        with self.assertRaises(ProtocolError):
            decode(_frame(b'{"kind":"UPDATE","round":1,"sender_id":0}'))

    def test_payload_mismatch_on_the_wire(self):
        data = encode(round_start_message(1, _adapters()))
        body = data[4:-4]
        with self.assertRaises(FramingError):
            decode(struct.pack(">I", len(body)) + body)

    def test_unexpected_payload(self):
        with self.assertRaises(FramingError):
            decode(_frame(b'{"kind":"SHUTDOWN","round":0,"sender_id":0}', b"\x00" * 4))

    def test_invalid_messages(self):
        with self.assertRaises(ProtocolError):
            Message(MessageKind.ERROR, 0, 0, header={"reason": "x", "round": 1})
        with self.assertRaises(ProtocolError):
            Message(MessageKind.ERROR, "0", 0, header={"reason": "x"})
        with self.assertRaises(ProtocolError):
            Message(MessageKind.ERROR, 0, 0, header={"reason": object()})
        with self.assertRaises(ProtocolError):
            Message(MessageKind.SHUTDOWN, 0, 0, tensor_payload=b"")


class TestFuzz(TestCase):
    def test_encode_decode(self):
        rng = random.Random(0)
        for _ in range(200):
            kind = rng.choice([MessageKind.REGISTER, MessageKind.ERROR, MessageKind.UPDATE, MessageKind.ROUND_COMPLETE])
            header = {"note": "".join(rng.choice("abcé\"\\ ") for _ in range(rng.randint(0, 12)))}
            payload = None
            if kind is MessageKind.ERROR:
                header["reason"] = rng.choice(["bad-signature", "", "ünïcode"])
            if kind is MessageKind.UPDATE:
                rows, cols = rng.randint(0, 4), rng.randint(0, 4)
                header.update(n_k=rng.randint(1, 10**6), signature="", tensor_manifest=[
                    {"target": "v", "which": "A", "rows": rows, "cols": cols}
                ])
                payload = bytes(rng.getrandbits(8) for _ in range(4 * rows * cols))
            msg = Message(kind, rng.randint(0, 2**40), rng.randint(-1, 2**31), header=header, tensor_payload=payload)
            self.assertEqual(decode(encode(msg)), msg)

    def test_random_bytes_only_raise_protocol_errors(self):
        rng = random.Random(1)
        for _ in range(500):
            body = bytes(rng.getrandbits(8) for _ in range(rng.randint(0, 64)))
            for data in (body, struct.pack(">I", len(body)) + body):
                try:
                    decode(data)
                except FedLoraError:
                    pass

    def test_byte_flips_only_raise_protocol_errors(self):
        identity = ClientIdentity.from_seed(0, b"fuzz")
        data = encode(update_message(1, identity, 12, _adapters()))
        rng = random.Random(2)
        for _ in range(500):
            mutated = bytearray(data)
            mutated[rng.randrange(len(data))] ^= rng.randint(1, 255)
            try:
                decode(bytes(mutated))
            except FedLoraError:
                pass


class TestAdapterCodec(TestCase):
    def test_quantize_is_float32(self):
        adapters = _adapters()
        quantized = quantize(adapters)
        for name, value in adapters.parameters().items():
            np.testing.assert_array_equal(quantized.parameters()[name], value.astype(np.float32).astype(np.float64))
        self.assertEqual(quantize(quantized).to_bytes(), quantized.to_bytes())

    def test_round_start_carries_session_settings(self):
        adapters = _adapters(alpha=7.0)
        msg = decode(encode(round_start_message(4, adapters)))
        self.assertEqual(msg.header["rank"], 2)
        self.assertEqual(msg.header["alpha"], 7.0)
        self.assertEqual([entry["target"] for entry in msg.header["tensor_manifest"]], ["q", "q", "up", "up"])
        self.assertEqual([entry["which"] for entry in msg.header["tensor_manifest"]], ["A", "B", "A", "B"])

    def test_signed_update(self):
        identity = ClientIdentity.from_seed(3, b"client")
        registry = KeyRegistry({3: identity.public_key})
        adapters = _adapters()
        msg = decode(encode(update_message(2, identity, 17, adapters)))
        update, canonical = update_from_message(msg, adapters.alpha, adapters.scaling_mode)
        self.assertEqual((update.client_id, update.round, update.n_k), (3, 2, 17))
        self.assertEqual(verify_update(registry, update, canonical).reason, "ok")
        self.assertEqual(update.adapters.to_bytes(), quantize(adapters).to_bytes())

        tampered_payload = bytearray(msg.tensor_payload)
        tampered_payload[0] ^= 0x01
        tampered = Message(msg.kind, msg.round, msg.sender_id, header=msg.header, tensor_payload=bytes(tampered_payload))
        update, canonical = update_from_message(tampered, adapters.alpha, adapters.scaling_mode)
        self.assertEqual(verify_update(registry, update, canonical).reason, "bad-signature")

        header = dict(msg.header, signature="not base64!")
        with self.assertRaises(ProtocolError):
            update_from_message(
                Message(msg.kind, msg.round, msg.sender_id, header=header, tensor_payload=msg.tensor_payload),
                adapters.alpha,
                adapters.scaling_mode,
            )


def test_adapter_files(tmp_path):
    adapters = _adapters()
    path = save_adapters(tmp_path / "global.bin", adapters, round=2)
    assert load_adapters(path).to_bytes() == quantize(adapters).to_bytes()
    identity = ClientIdentity.from_seed(0, b"k")
    update_path = save_frame(tmp_path / "update.bin", update_message(1, identity, 3, adapters))
    with pytest.raises(ProtocolError):
        load_adapters(update_path)


class TestRoundState(TestCase):
    def test_phases_only_move_forward(self):
        state = RoundState(round=1, expected_clients=frozenset({0, 1}), deadline=0.0)
        state.advance(RoundPhase.COLLECTING)
        with self.assertRaises(ProtocolError):
            state.advance(RoundPhase.BROADCASTING)
        with self.assertRaises(ProtocolError):
            state.advance(RoundPhase.COLLECTING)
        state.advance(RoundPhase.DONE)
        self.assertEqual(state.history, [RoundPhase.BROADCASTING, RoundPhase.COLLECTING, RoundPhase.DONE])

    def test_accept_only_while_collecting(self):
        state = RoundState(round=1, expected_clients=frozenset({0}), deadline=0.0)
        identity = ClientIdentity.from_seed(0, b"x")
        msg = update_message(1, identity, 3, _adapters())
        update, _ = update_from_message(msg, 4.0, "alpha_over_r")
        with self.assertRaises(ProtocolError):
            state.accept(update)
        state.advance(RoundPhase.COLLECTING)
        state.accept(update)
        self.assertEqual(list(state.received), [0])
        with self.assertRaises(ProtocolError):
            state.accept(dataclasses.replace(update, client_id=5))


class TestTransports(TestCase):
    def _exchange(self, listener):
        client = listener.connect(timeout=5)
        server = listener.accept(timeout=5)
        msg = Message(MessageKind.ERROR, 1, 2, header={"reason": "r"})
        client.send(msg)
        self.assertEqual(server.recv(timeout=5), msg)
        with self.assertRaises(TimeoutError):
            server.recv(timeout=0.05)
        client.close()
        with self.assertRaises(FedConnectionError):
            server.recv(timeout=5)
        server.close()

    def test_in_process(self):
        self._exchange(InProcessListener())

    @require_socket
    def test_socket(self):
        listener = SocketListener("127.0.0.1", 0)
        try:
            self.assertNotEqual(listener.address[1], 0)
            self._exchange(listener)
        finally:
            listener.close()


def _deltas(adapters):
    return {pair.target: pair.delta() for pair in adapters}


def test_message_counts(config, shards, model):
    config = dataclasses.replace(config, rounds=3)
    result = simulate(config, shards=shards, model=model)
    assert result.sent["ROUND_START"] == 9
    assert result.received["UPDATE"] == 9
    assert result.received["REGISTER"] == 3
    assert result.sent["SHUTDOWN"] == 3
    assert len(result.ledger) == 9
    assert result.ledger.validate() is None
    assert [record.round for record in result.rounds] == [1, 2, 3]
    assert all(record.phases == ["broadcasting", "collecting", "aggregating", "done"] for record in result.rounds)
    assert sorted(result.client_adapters) == [0, 1, 2]


def test_single_client_global_equals_update(config, model):
    config = dataclasses.replace(config, rounds=1, task=tiny_task(clients=1, client_sizes=(12,)))
    result = simulate(config, model=model)
    record = result.rounds[0]
    assert record.state.weights == {0: 1.0}
    expected = _deltas(record.updates[0].adapters)
    for target, delta in _deltas(result.global_adapters()).items():
        np.testing.assert_allclose(delta, expected[target], rtol=0, atol=1e-9)


def test_silent_client_is_a_straggler(config, shards, model):
    faults = {1: ClientFaults(silent_rounds=frozenset({2}))}
    result = simulate(config, shards=shards, model=model, faults=faults)
    first, second = result.rounds
    assert first.stragglers == []
    assert second.stragglers == [1]
    assert sorted(second.updates) == [0, 2]
    n = {shard.client_id: shard.n_k for shard in shards}
    assert second.state.weights == pytest.approx({0: n[0] / (n[0] + n[2]), 2: n[2] / (n[0] + n[2])}, abs=1e-15)
    assert result.ledger.balances() == {0: 20, 1: 10, 2: 20}


def test_forged_update_rejected(config, shards, model):
    faults = {2: ClientFaults(forged_rounds=frozenset({1}))}
    result = simulate(config, shards=shards, model=model, faults=faults)
    first, second = result.rounds
    assert first.rejected == {2: "bad-signature"}
    assert sorted(first.updates) == [0, 1]
    assert first.stragglers == []
    assert sorted(second.updates) == [0, 1, 2]
    assert [(entry.round, entry.client_id) for entry in result.ledger] == [(1, 0), (1, 1), (2, 0), (2, 1), (2, 2)]


def test_unregistered_identity_rejected(config, shards, model):
    identities = {k: ClientIdentity.from_seed(k, f"c{k}".encode()) for k in range(3)}
    registry = KeyRegistry({k: identities[k].public_key for k in (0, 1)})
    result = simulate(config, shards=shards, model=model, identities=identities, registry=registry)
    assert all(record.rejected == {2: "unknown-identity"} for record in result.rounds)


def test_no_local_training_echoes_broadcast(config, shards, model):
    config = dataclasses.replace(config, rounds=1, local_epochs=0)
    result = simulate(config, shards=shards, model=model)
    expected = quantize(result.initial_adapters).to_bytes()
    for update in result.rounds[0].updates.values():
        assert update.adapters.to_bytes() == expected


def test_every_client_silent(config, shards, model):
    faults = {k: ClientFaults(silent_rounds=frozenset({1})) for k in range(3)}
    with pytest.raises(RoundFailureError) as excinfo:
        simulate(dataclasses.replace(config, client_timeout=1.0), shards=shards, model=model, faults=faults)
    assert excinfo.value.round == 1
    assert excinfo.value.partial_result.rounds == []


def test_runs_are_deterministic(config, shards, model):
    first = simulate(config, shards=shards, model=model)
    second = simulate(config, shards=shards, model=model)
    assert first.global_adapters().to_bytes() == second.global_adapters().to_bytes()
    assert first.ledger.head == second.ledger.head


@require_socket
def test_socket_matches_in_process(config, shards, model):
    in_process = simulate(config, shards=shards, model=model)
    over_tcp = simulate(dataclasses.replace(config, transport="socket"), shards=shards, model=model)
    reference = _deltas(in_process.global_adapters())
    for target, delta in _deltas(over_tcp.global_adapters()).items():
        np.testing.assert_allclose(delta, reference[target], rtol=0, atol=1e-9)
    assert over_tcp.received == in_process.received


def test_accepted_updates_saved(config, shards, model, tmp_path):
    result = simulate(config, shards=shards, model=model, updates_dir=tmp_path)
    stored = sorted(path.relative_to(tmp_path).as_posix() for path in tmp_path.rglob("*.bin"))
    assert stored == [f"round-{t}/client_{k}.bin" for t in (1, 2) for k in range(3)]
    msg = decode((tmp_path / "round-2" / "client_1.bin").read_bytes())
    assert msg.kind is MessageKind.UPDATE
    assert base64.b64decode(msg.header["signature"]) == result.rounds[1].updates[1].signature
    summaries = result.write_summaries(tmp_path / "round_summary.jsonl").read_text().splitlines()
    assert [json.loads(line)["round"] for line in summaries] == [1, 2]
