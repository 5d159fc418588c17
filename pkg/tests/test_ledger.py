"""Unit tests for the Redis session ledger."""

import json
import os
import zlib
from unittest.mock import patch

import redis as redis_module
from fakeredis import FakeRedis

from cipherdenoise.ledger import (
    DEFAULT_LEDGER_PREFIX,
    DEFAULT_RECORD_TTL,
    LEDGER_PREFIX_ENV,
    SessionLedger,
    ledger_enabled,
    ledger_key_prefix,
)
from cipherdenoise.protocol.session import SessionMetrics


def _metrics(session_id: str = "ab" * 16, **fields) -> SessionMetrics:
    values = {
        "framework": "nonlinear",
        "up_bytes": 100,
        "down_bytes": 200,
        "act_round_trips": 2,
        "outcome": "ok",
        **fields,
    }
    return SessionMetrics(session_id=session_id, **values)


class TestSessionLedger:
    """Test SessionLedger record keeping."""

    def test_init(self, ledger: SessionLedger) -> None:
        """Test initialization."""
        assert ledger.server_name == "test-server"
        assert ledger.key_prefix == "test:test-server:"
        assert ledger.redis_client is not None

    def test_get_key(self, ledger: SessionLedger) -> None:
        """Test key prefix generation."""
        assert ledger._get_key("abc") == "test:test-server:abc"
        assert ledger.index_key == "test:test-server:index"

    def test_record(self, ledger: SessionLedger) -> None:
        """Test a finished session lands as a compressed JSON blob."""
        assert ledger.record(_metrics()) is True

        stored = ledger.redis_client.get(ledger._get_key("ab" * 16))
        assert stored is not None
        document = json.loads(zlib.decompress(stored))
        assert document["up_bytes"] == 100
        assert document["down_bytes"] == 200
        assert document["act_round_trips"] == 2
        assert document["server"] == "test-server"
        assert "finished_at" in document

    def test_record_holds_counters_only(self, ledger: SessionLedger) -> None:
        """Test nothing but identifiers and counters is stored."""
        ledger.record(_metrics())
        document = ledger.get_session("ab" * 16)
        assert document is not None
        assert set(document) == set(SessionLedger.RECORD_FIELDS) | {"server", "finished_at"}

    def test_record_without_session_id(self, ledger: SessionLedger) -> None:
        """Test sessions that never said HELLO are skipped."""
        assert ledger.record(_metrics(session_id="")) is False
        assert ledger.list_sessions() == []

    def test_get_session_missing(self, ledger: SessionLedger) -> None:
        assert ledger.get_session("missing") is None

    def test_list_sessions_sorted(self, ledger: SessionLedger) -> None:
        """Test the index lists every recorded session in order."""
        for session_id in ("cc", "aa", "bb"):
            ledger.record(_metrics(session_id=session_id))
        assert ledger.list_sessions() == ["aa", "bb", "cc"]

    def test_record_overwrites(self, ledger: SessionLedger) -> None:
        ledger.record(_metrics(outcome="open"))
        ledger.record(_metrics(outcome="ok"))
        assert ledger.get_session("ab" * 16)["outcome"] == "ok"
        assert ledger.list_sessions() == ["ab" * 16]

    def test_servers_are_isolated(self, ledger: SessionLedger, fake_redis: FakeRedis) -> None:
        """Test two servers sharing one Redis do not see each other's sessions."""
        with patch("cipherdenoise.ledger.redis.from_url", return_value=fake_redis):
            other = SessionLedger("redis://localhost:6379/0", "other-server", key_prefix="test:")
        ledger.record(_metrics(session_id="aa"))
        other.record(_metrics(session_id="bb"))
        assert ledger.list_sessions() == ["aa"]
        assert other.list_sessions() == ["bb"]

    def test_env_prefix(self, fake_redis: FakeRedis) -> None:
        """Test the base prefix falls back to the environment."""
        with (
            patch.dict(os.environ, {LEDGER_PREFIX_ENV: "custom:"}),
            patch("cipherdenoise.ledger.redis.from_url", return_value=fake_redis),
        ):
            ledger = SessionLedger("redis://localhost:6379/0", "srv")
        assert ledger.key_prefix == "custom:srv:"

    def test_default_prefix(self) -> None:
        with patch.dict(os.environ, {}, clear=True):
            assert ledger_key_prefix() == DEFAULT_LEDGER_PREFIX

    def test_ping(self, ledger: SessionLedger) -> None:
        """Test Redis connection ping."""
        assert ledger.ping() is True

    def test_close(self, ledger: SessionLedger) -> None:
        """Test closing Redis connection."""
        ledger.close()


class TestSessionLedgerExpiry:
    """Test record expiry and index pruning."""

    def test_record_and_index_expire(self, ledger: SessionLedger) -> None:
        ledger.record(_metrics())
        client = ledger.redis_client
        assert 0 < client.ttl(ledger._get_key("ab" * 16)) <= DEFAULT_RECORD_TTL
        assert 0 < client.ttl(ledger.index_key) <= DEFAULT_RECORD_TTL

    def test_zero_ttl_keeps_records(self, fake_redis: FakeRedis) -> None:
        with patch("cipherdenoise.ledger.redis.from_url", return_value=fake_redis):
            ledger = SessionLedger("redis://localhost:6379/0", "srv", key_prefix="t:", ttl=0)
        ledger.record(_metrics())
        assert ledger.ttl is None
        assert fake_redis.ttl(ledger._get_key("ab" * 16)) == -1
        assert fake_redis.ttl(ledger.index_key) == -1

    def test_prune_drops_expired_entries(self, ledger: SessionLedger) -> None:
        for session_id in ("aa", "bb"):
            ledger.record(_metrics(session_id=session_id))
        ledger.redis_client.delete(ledger._get_key("aa"))
        assert ledger.prune() == 1
        assert ledger.list_sessions() == ["bb"]
        assert ledger.prune() == 0

    def test_prune_older_than(self, ledger: SessionLedger) -> None:
        for session_id in ("old", "new"):
            ledger.record(_metrics(session_id=session_id))
        document = ledger.get_session("old")
        document["finished_at"] = 1000.0
        ledger.redis_client.set(
            ledger._get_key("old"), zlib.compress(json.dumps(document).encode("utf-8"))
        )
        assert ledger.prune(older_than=2000.0) == 1
        assert ledger.list_sessions() == ["new"]
        assert ledger.get_session("old") is None

    def test_prune_empty(self, ledger: SessionLedger) -> None:
        assert ledger.prune() == 0

    def test_prune_redis_error(self, ledger: SessionLedger) -> None:
        ledger.record(_metrics(session_id="aa"))
        ledger.redis_client.delete(ledger._get_key("aa"))
        with patch.object(
            ledger.redis_client, "pipeline", side_effect=redis_module.RedisError("down")
        ):
            assert ledger.prune() == 0
        assert ledger.list_sessions() == ["aa"]


class TestLedgerEnabled:
    def test_redis_urls(self) -> None:
        assert ledger_enabled("redis://localhost:6379/0")
        assert ledger_enabled("rediss://secure:6380/1")

    def test_other_urls(self) -> None:
        assert not ledger_enabled(None)
        assert not ledger_enabled("")
        assert not ledger_enabled("/var/lib/sessions.db")
        assert not ledger_enabled("http://localhost")


class TestSessionLedgerErrors:
    """Test error handling in SessionLedger."""

    def test_record_redis_error(self, ledger: SessionLedger) -> None:
        """Test record returns False on Redis error."""
        with patch.object(
            ledger.redis_client, "pipeline", side_effect=redis_module.RedisError("Redis error")
        ):
            assert ledger.record(_metrics()) is False

    def test_get_session_redis_error(self, ledger: SessionLedger) -> None:
        """Test get_session returns None on Redis error."""
        with patch.object(
            ledger.redis_client, "get", side_effect=redis_module.RedisError("Redis error")
        ):
            assert ledger.get_session("ab" * 16) is None

    def test_list_sessions_redis_error(self, ledger: SessionLedger) -> None:
        with patch.object(
            ledger.redis_client, "smembers", side_effect=redis_module.ConnectionError("down")
        ):
            assert ledger.list_sessions() == []

    def test_ping_redis_error(self, ledger: SessionLedger) -> None:
        """Test ping returns False on Redis error."""
        with patch.object(
            ledger.redis_client, "ping", side_effect=redis_module.RedisError("Redis error")
        ):
            assert ledger.ping() is False

    def test_close_error_handling(self, ledger: SessionLedger) -> None:
        """Test close handles errors gracefully."""
        with patch.object(
            ledger.redis_client, "close", side_effect=redis_module.RedisError("Close error")
        ):
            ledger.close()

    def test_get_session_corrupted_data(self, ledger: SessionLedger) -> None:
        """Test get_session handles corrupted data gracefully."""
        ledger.redis_client.set(ledger._get_key("bad"), b"corrupted data")
        assert ledger.get_session("bad") is None
