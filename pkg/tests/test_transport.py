"""Tests for the asyncio stream transport."""

import asyncio
import struct

import pytest

from cipherdenoise.errors import ProtocolError
from cipherdenoise.model import encode_image, infer_plain_fixed
from cipherdenoise.protocol import StreamServer
from cipherdenoise.protocol.transport import read_frame, run_remote_session
from cipherdenoise.protocol.wire import Framework, MessageTag, decode_error


@pytest.fixture
async def stream(make_pair, tiny_model):
    client, server = make_pair(tiny_model)
    stream = StreamServer(server, "127.0.0.1", 0)
    await stream.start()
    yield client, stream
    await stream.close()


class TestStreamServer:
    async def test_remote_session(self, stream, tiny_model, tiny_image) -> None:
        client, server = stream
        encoded = encode_image(tiny_model, tiny_image)
        session = client.new_session(encoded)
        output = await run_remote_session(session, server.host, server.port, timeout=30)
        assert output == infer_plain_fixed(tiny_model, encoded)
        assert session.metrics.act_round_trips == 2
        assert session.metrics.outcome == "ok"

    async def test_concurrent_sessions(self, stream, tiny_model, tiny_image) -> None:
        client, server = stream
        encoded = encode_image(tiny_model, tiny_image)
        sessions = [client.new_session(encoded) for _ in range(2)]
        outputs = await asyncio.gather(
            *(run_remote_session(s, server.host, server.port, timeout=30) for s in sessions)
        )
        expected = infer_plain_fixed(tiny_model, encoded)
        assert all(output == expected for output in outputs)
        assert sessions[0].session_id != sessions[1].session_id

    async def test_malformed_length_prefix(self, stream, tiny_model, tiny_image) -> None:
        client, server = stream
        reader, writer = await asyncio.open_connection(server.host, server.port)
        writer.write(struct.pack(">I", 3))
        await writer.drain()
        frame = await asyncio.wait_for(read_frame(reader), 10)
        assert frame is not None
        assert frame.tag is MessageTag.ERROR
        code, _ = decode_error(frame.payload)
        assert code == ProtocolError.BAD_FRAME
        writer.close()
        await writer.wait_closed()

        # the listener keeps serving after a bad connection
        encoded = encode_image(tiny_model, tiny_image)
        output = await run_remote_session(
            client.new_session(encoded), server.host, server.port, timeout=30
        )
        assert output == infer_plain_fixed(tiny_model, encoded)

    async def test_refusal_reaches_client(self, make_pair, tiny_model, tiny_image) -> None:
        client, server = make_pair(tiny_model)
        stream = StreamServer(server, "127.0.0.1", 0)
        await stream.start()
        try:
            session = client.new_session(
                encode_image(tiny_model, tiny_image), framework=Framework.LINEAR
            )
            with pytest.raises(ProtocolError) as info:
                await run_remote_session(session, stream.host, stream.port, timeout=30)
            assert info.value.code == ProtocolError.REFUSED
        finally:
            await stream.close()

    async def test_unreachable_server(self, make_pair, tiny_model, tiny_image) -> None:
        client, _ = make_pair(tiny_model)
        session = client.new_session(encode_image(tiny_model, tiny_image))
        with pytest.raises(ProtocolError, match="cannot reach"):
            await run_remote_session(session, "127.0.0.1", 1, timeout=5)

    async def test_serve_until_stop(self, make_pair, tiny_model) -> None:
        _, server = make_pair(tiny_model)
        stream = StreamServer(server, "127.0.0.1", 0)
        stop = asyncio.Event()
        task = asyncio.create_task(stream.serve_until(stop))
        await asyncio.sleep(0.05)
        stop.set()
        await asyncio.wait_for(task, 10)
