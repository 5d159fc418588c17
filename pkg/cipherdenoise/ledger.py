import json
import logging
import os
import time
import zlib
from collections.abc import Callable
from typing import TYPE_CHECKING, Any

import redis

if TYPE_CHECKING:
    from cipherdenoise.protocol.session import SessionMetrics

logger = logging.getLogger(__name__)

LEDGER_PREFIX_ENV = "CIPHERDENOISE_LEDGER_KEY_PREFIX"
DEFAULT_LEDGER_PREFIX = "cipherdenoise:session:"
DEFAULT_RECORD_TTL = 7 * 24 * 3600


def ledger_enabled(url: str | None) -> bool:
    """Only redis:// and rediss:// URLs turn the ledger on."""
    if not url:
        return False
    return url.startswith(("redis://", "rediss://"))


def ledger_key_prefix(default: str = DEFAULT_LEDGER_PREFIX) -> str:
    return os.environ.get(LEDGER_PREFIX_ENV, default)


class SessionLedger:
    """Redis record of finished server sessions with per-server key isolation.

    Each server writes under ``<prefix><server_name>:`` so several servers
    can share one Redis without colliding. A record holds counters and
    identifiers only: no keys, ciphertexts, perturbances or sign bits.
    Records expire after ``ttl`` seconds; every write pushes the index
    expiry forward, and :meth:`prune` drops index entries that outlived
    their record.

    Attributes:
        redis_client: Redis client instance
        key_prefix: Prefix for all Redis keys (includes the server name)
    """

    compress: Callable[[bytes], bytes] = zlib.compress
    decompress: Callable[[bytes], bytes] = zlib.decompress

    RECORD_FIELDS = (
        "session_id",
        "framework",
        "up_bytes",
        "down_bytes",
        "handshake_up",
        "handshake_down",
        "act_round_trips",
        "outcome",
    )

    def __init__(
        self,
        redis_url: str,
        server_name: str,
        key_prefix: str | None = None,
        ttl: int | None = DEFAULT_RECORD_TTL,
    ) -> None:
        """Connect to the ledger.

        Args:
            redis_url: Redis connection URL (e.g., 'redis://localhost:6379/0')
            server_name: Identifier of the serving process
            key_prefix: Base prefix; defaults to $CIPHERDENOISE_LEDGER_KEY_PREFIX
            ttl: Seconds a record (and an idle index) lives; None or 0 keeps them
        """
        self.redis_url = redis_url
        self.server_name = server_name
        self.ttl = ttl or None
        base = ledger_key_prefix() if key_prefix is None else key_prefix
        self.key_prefix = f"{base}{server_name}:"

        self.redis_client = redis.from_url(
            redis_url,
            decode_responses=False,
            socket_connect_timeout=5,
            socket_keepalive=True,
            health_check_interval=30,
        )

        logger.info(
            "[cipherdenoise] SessionLedger initialized for server=%s, prefix=%s, ttl=%s",
            self.server_name,
            self.key_prefix,
            self.ttl,
        )

    def _get_key(self, name: str) -> str:
        return f"{self.key_prefix}{name}"

    @property
    def index_key(self) -> str:
        return self._get_key("index")

    def record(self, metrics: "SessionMetrics") -> bool:
        if not metrics.session_id:
            logger.debug("[cipherdenoise] Not recording a session that never said HELLO")
            return False
        document: dict[str, Any] = {name: getattr(metrics, name) for name in self.RECORD_FIELDS}
        document["server"] = self.server_name
        document["finished_at"] = time.time()
        blob = self.compress(json.dumps(document, sort_keys=True).encode("utf-8"))
        success = False
        try:
            pipe = self.redis_client.pipeline()
            pipe.set(self._get_key(metrics.session_id), blob, ex=self.ttl)
            pipe.sadd(self.index_key, metrics.session_id)
            if self.ttl is not None:
                pipe.expire(self.index_key, self.ttl)
            pipe.execute()
        except (redis.ConnectionError, redis.TimeoutError, redis.RedisError) as exc:
            logger.error("[cipherdenoise] Error recording session to Redis: %s", exc)
        else:
            success = True
            logger.debug("[cipherdenoise] Recorded session %s", metrics.session_id)
        return success

    def get_session(self, session_id: str) -> dict[str, Any] | None:
        try:
            value = self.redis_client.get(self._get_key(session_id))
            if value is None:
                return None
            document: dict[str, Any] = json.loads(self.decompress(value))
            return document
        except (redis.ConnectionError, redis.TimeoutError, redis.RedisError) as exc:
            logger.error("[cipherdenoise] Failed to get session %s: %s", session_id, exc)
            return None
        except Exception as exc:
            logger.error(
                "[cipherdenoise] Failed to decode session %s (corrupted data?): %s", session_id, exc
            )
            return None

    def list_sessions(self) -> list[str]:
        try:
            members = self.redis_client.smembers(self.index_key)
        except (redis.ConnectionError, redis.TimeoutError, redis.RedisError) as exc:
            logger.error("[cipherdenoise] Failed to list sessions: %s", exc)
            return []
        return sorted(m.decode("ascii") if isinstance(m, bytes) else str(m) for m in members)

    def prune(self, older_than: float | None = None) -> int:
        """Drop index entries whose record expired, and records finished before ``older_than``.

        ``older_than`` is a Unix timestamp. Returns the number of sessions removed.
        """
        removed: list[str] = []
        for session_id in self.list_sessions():
            key = self._get_key(session_id)
            try:
                exists = bool(self.redis_client.exists(key))
            except (redis.ConnectionError, redis.TimeoutError, redis.RedisError) as exc:
                logger.error("[cipherdenoise] Prune stopped at session %s: %s", session_id, exc)
                break
            if exists and older_than is not None:
                document = self.get_session(session_id)
                exists = document is None or document.get("finished_at", 0.0) >= older_than
            if not exists:
                removed.append(session_id)
        if not removed:
            return 0
        try:
            pipe = self.redis_client.pipeline()
            pipe.delete(*(self._get_key(s) for s in removed))
            pipe.srem(self.index_key, *removed)
            pipe.execute()
        except (redis.ConnectionError, redis.TimeoutError, redis.RedisError) as exc:
            logger.error("[cipherdenoise] Failed to prune %d sessions: %s", len(removed), exc)
            return 0
        logger.info("[cipherdenoise] Pruned %d sessions from %s", len(removed), self.index_key)
        return len(removed)

    def ping(self) -> bool:
        """True when the ledger answers; an unreachable ledger never raises."""
        try:
            return bool(self.redis_client.ping())
        except (redis.ConnectionError, redis.TimeoutError, redis.RedisError) as exc:
            logger.warning("[cipherdenoise] Ledger at %s is unreachable: %s", self.redis_url, exc)
            return False

    def close(self) -> None:
        """Release the connection pool; records already written are unaffected."""
        try:
            self.redis_client.close()
        except redis.RedisError as exc:
            logger.warning(
                "[cipherdenoise] Ledger for server=%s did not close cleanly: %s",
                self.server_name,
                exc,
            )
        else:
            logger.debug("[cipherdenoise] Ledger for server=%s closed", self.server_name)
