"""Moving frames between client and server sessions.

Both transports drive the same sans-IO state machines: an in-process
loopback for deterministic runs, and asyncio streams for the network.
"""

import asyncio
import contextlib
import logging
from dataclasses import dataclass, field

from cipherdenoise.ciphertensor import PlainTensor
from cipherdenoise.errors import CipherDenoiseError, ProtocolError
from cipherdenoise.protocol.client import ClientSession, InferenceClient
from cipherdenoise.protocol.server import InferenceServer, ServerSession
from cipherdenoise.protocol.session import SessionMetrics
from cipherdenoise.protocol.wire import (
    LENGTH_PREFIX_BYTES,
    SESSION_ID_BYTES,
    Frame,
    Framework,
    MessageTag,
    encode_error,
    frame_length,
)

logger = logging.getLogger(__name__)

UP = "up"
DOWN = "down"


@dataclass
class SessionResult:
    output: PlainTensor
    client_metrics: SessionMetrics
    server_metrics: SessionMetrics | None = None
    transcript: list[tuple[str, bytes]] = field(default_factory=list)
    observed: list[tuple[int, PlainTensor]] = field(default_factory=list)

    def frames(self, tag: MessageTag) -> list[Frame]:
        return [
            frame
            for _, raw in self.transcript
            if (frame := Frame.decode(raw)).tag is tag
        ]


class LoopbackTransport:
    """Runs a client and a server session in-process, recording raw frames."""

    def __init__(self) -> None:
        self.transcript: list[tuple[str, bytes]] = []

    def run(self, client: ClientSession, server: ServerSession) -> PlainTensor:
        outbox = [client.start()]
        while outbox:
            frame = outbox.pop(0)
            raw = frame.encode()
            self.transcript.append((UP, raw))
            for reply in server.handle(Frame.decode(raw)):
                reply_raw = reply.encode()
                self.transcript.append((DOWN, reply_raw))
                try:
                    outbox.extend(client.handle(Frame.decode(reply_raw)))
                except CipherDenoiseError as exc:
                    if reply.tag is not MessageTag.ERROR:
                        server.handle(client.error_frame(exc))
                    raise
        if client.result is None:
            raise ProtocolError("session ended without a result", ProtocolError.ORDER)
        return client.result


def run_session(
    client: InferenceClient,
    server: InferenceServer,
    image: PlainTensor,
    framework: Framework | None = None,
    model_name: str = "",
) -> SessionResult:
    """One full session over the loopback transport."""
    client_session = client.new_session(image, model_name, framework)
    server_session = server.new_session()
    transport = LoopbackTransport()
    output = transport.run(client_session, server_session)
    return SessionResult(
        output=output,
        client_metrics=client_session.metrics,
        server_metrics=server_session.metrics,
        transcript=transport.transcript,
        observed=client_session.observed,
    )


def run_linear_session(
    client: InferenceClient, server: InferenceServer, image: PlainTensor
) -> SessionResult:
    """Single round trip; refused at HELLO unless the served model is linear."""
    return run_session(client, server, image, Framework.LINEAR)


def run_nonlinear_session(
    client: InferenceClient, server: InferenceServer, image: PlainTensor
) -> SessionResult:
    """One sign exchange per activation layer."""
    return run_session(client, server, image, Framework.NONLINEAR)


# Stream transport


async def read_frame(reader: asyncio.StreamReader) -> Frame | None:
    """Next frame, or None on a clean end of stream."""
    try:
        prefix = await reader.readexactly(LENGTH_PREFIX_BYTES)
    except asyncio.IncompleteReadError as exc:
        if exc.partial:
            raise ProtocolError(
                "stream closed inside a length prefix", ProtocolError.BAD_FRAME
            ) from exc
        return None
    length = frame_length(prefix)
    try:
        body = await reader.readexactly(length)
    except asyncio.IncompleteReadError as exc:
        raise ProtocolError(
            f"stream closed after {len(exc.partial)} of {length} frame bytes",
            ProtocolError.BAD_FRAME,
        ) from exc
    return Frame.decode_body(body)


async def write_frame(writer: asyncio.StreamWriter, frame: Frame) -> None:
    writer.write(frame.encode())
    await writer.drain()


class StreamServer:
    """asyncio front end; at most ``max_sessions`` sessions compute at once."""

    def __init__(self, server: InferenceServer, host: str = "127.0.0.1", port: int = 0) -> None:
        self.server = server
        self.host = host
        self.port = port
        self._slots = asyncio.Semaphore(server.config.max_sessions)
        self._server: asyncio.Server | None = None
        self._connections: set[asyncio.Task[None]] = set()

    async def start(self) -> tuple[str, int]:
        self._server = await asyncio.start_server(self._handle_connection, self.host, self.port)
        sockname = self._server.sockets[0].getsockname()
        self.host, self.port = sockname[0], sockname[1]
        logger.info(
            "[cipherdenoise] Serving %s on %s:%d", self.server.model.name, self.host, self.port
        )
        return self.host, self.port

    async def serve_until(self, stop: asyncio.Event) -> None:
        if self._server is None:
            await self.start()
        await stop.wait()
        await self.close()

    async def close(self) -> None:
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
            self._server = None
        for task in list(self._connections):
            task.cancel()
        if self._connections:
            await asyncio.gather(*self._connections, return_exceptions=True)
        logger.info("[cipherdenoise] Server stopped")

    async def _handle_connection(
        self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter
    ) -> None:
        task = asyncio.current_task()
        if task is not None:
            self._connections.add(task)
        session = self.server.new_session()
        try:
            async with self._slots:
                await self._drive(session, reader, writer)
        finally:
            session.abandon("connection closed")
            writer.close()
            with contextlib.suppress(ConnectionError, OSError):
                await writer.wait_closed()
            if task is not None:
                self._connections.discard(task)

    async def _drive(
        self, session: ServerSession, reader: asyncio.StreamReader, writer: asyncio.StreamWriter
    ) -> None:
        while not session.finished:
            try:
                frame = await read_frame(reader)
            except ProtocolError as exc:
                # the stream cannot be resynchronised after a bad frame
                session_id = session.session_id or bytes(SESSION_ID_BYTES)
                error = Frame(MessageTag.ERROR, session_id, encode_error(exc.code, str(exc)))
                with contextlib.suppress(ConnectionError):
                    await write_frame(writer, error)
                session.abandon(str(exc))
                return
            if frame is None:
                return
            replies = await asyncio.to_thread(session.handle, frame)
            for reply in replies:
                await write_frame(writer, reply)


async def run_remote_session(
    session: ClientSession, host: str, port: int, timeout: float | None = None
) -> PlainTensor:
    """Drive ``session`` against a :class:`StreamServer`."""
    try:
        reader, writer = await asyncio.wait_for(asyncio.open_connection(host, port), timeout)
    except (OSError, asyncio.TimeoutError) as exc:
        raise ProtocolError(f"cannot reach {host}:{port}: {exc}", ProtocolError.INTERNAL) from exc
    try:
        await write_frame(writer, session.start())
        while not session.finished:
            frame = await asyncio.wait_for(read_frame(reader), timeout)
            if frame is None:
                raise ProtocolError(
                    f"server closed the connection while {session.phase.value}",
                    ProtocolError.INTERNAL,
                )
            try:
                replies = await asyncio.to_thread(session.handle, frame)
            except CipherDenoiseError as exc:
                if frame.tag is not MessageTag.ERROR:
                    with contextlib.suppress(ConnectionError):
                        await write_frame(writer, session.error_frame(exc))
                raise
            for reply in replies:
                await write_frame(writer, reply)
    except (ConnectionError, asyncio.TimeoutError) as exc:
        raise ProtocolError(
            f"network failure while {session.phase.value}: {exc!r}", ProtocolError.INTERNAL
        ) from exc
    finally:
        writer.close()
        with contextlib.suppress(ConnectionError, OSError):
            await writer.wait_closed()
    assert session.result is not None
    return session.result


def denoise_remote(
    client: InferenceClient,
    image: PlainTensor,
    host: str,
    port: int,
    model_name: str = "",
    timeout: float | None = None,
) -> SessionResult:
    session = client.new_session(image, model_name)
    output = asyncio.run(run_remote_session(session, host, port, timeout))
    return SessionResult(output=output, client_metrics=session.metrics, observed=session.observed)
