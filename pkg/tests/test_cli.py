"""Tests for the click command line."""

import asyncio
import json
import threading
from pathlib import Path
from unittest.mock import patch

import numpy as np
import pytest
import redis as redis_module
from click.testing import CliRunner
from fakeredis import FakeRedis

from cipherdenoise.cli import cli
from cipherdenoise.encoding import dequantize_array
from cipherdenoise.imageio import encode_pgm, read_pgm, write_pgm
from cipherdenoise.ledger import SessionLedger
from cipherdenoise.model import encode_image, infer_plain_fixed, save_model
from cipherdenoise.protocol import InferenceServer, StreamServer
from cipherdenoise.protocol.session import SessionMetrics


@pytest.fixture
def runner() -> CliRunner:
    return CliRunner()


@pytest.fixture
def tiny_cdm(tiny_model, tmp_path: Path) -> Path:
    path = tmp_path / "tiny.cdm"
    save_model(tiny_model, path)
    return path


@pytest.fixture
def key_dir(runner: CliRunner, tmp_path: Path) -> Path:
    directory = tmp_path / "keys"
    result = runner.invoke(
        cli, ["keygen", "--bits", "128", "--seed", "1", "--out-dir", str(directory)]
    )
    assert result.exit_code == 0, result.output
    return directory


@pytest.fixture
def blocker(tmp_path: Path) -> Path:
    """A regular file that paths are then built underneath."""
    path = tmp_path / "blocker"
    path.write_text("not a directory")
    return path


@pytest.fixture
def live_server(tiny_model, server_config):
    """A StreamServer on its own event loop thread; yields it with finished server metrics."""
    finished: list[SessionMetrics] = []
    server = InferenceServer(tiny_model, server_config)
    server.finish = finished.append  # type: ignore[method-assign]
    stream = StreamServer(server, "127.0.0.1", 0)
    loop = asyncio.new_event_loop()
    ready = threading.Event()

    def run() -> None:
        asyncio.set_event_loop(loop)
        loop.run_until_complete(stream.start())
        ready.set()
        loop.run_forever()

    thread = threading.Thread(target=run, daemon=True)
    thread.start()
    assert ready.wait(10)
    yield stream, finished
    asyncio.run_coroutine_threadsafe(stream.close(), loop).result(10)
    loop.call_soon_threadsafe(loop.stop)
    thread.join(10)
    loop.close()


def _counters(output: str) -> dict[str, str]:
    rows = (line.rsplit("  ", 1) for line in output.splitlines() if "  " in line)
    return {label.strip(): value.strip() for label, value in rows}


class TestKeygen:
    def test_writes_key_files(self, runner: CliRunner, key_dir: Path) -> None:
        assert (key_dir / "paillier.pub").exists()
        assert (key_dir / "paillier.key").exists()

    def test_seeded_keys_repeat(self, runner: CliRunner, tmp_path: Path) -> None:
        outputs = [
            runner.invoke(
                cli, ["keygen", "--bits", "64", "--seed", "5", "--out-dir", str(tmp_path / d)]
            ).output
            for d in ("a", "b")
        ]
        assert outputs[0] == outputs[1]
        assert outputs[0].startswith("64-bit key ")

    def test_key_too_small(self, runner: CliRunner, tmp_path: Path) -> None:
        result = runner.invoke(cli, ["keygen", "--bits", "8", "--out-dir", str(tmp_path)])
        assert result.exit_code == 1
        assert "minimum" in result.output

    def test_unwritable_directory(self, runner: CliRunner, blocker: Path) -> None:
        result = runner.invoke(
            cli, ["keygen", "--bits", "64", "--out-dir", str(blocker / "sub")]
        )
        assert result.exit_code == 3
        assert "cannot create key directory" in result.output


class TestEncryptDecrypt:
    def test_round_trip(self, runner: CliRunner, key_dir: Path, tmp_path: Path) -> None:
        image = np.random.default_rng(0).uniform(0.0, 1.0, (4, 5))
        write_pgm(tmp_path / "in.pgm", image)
        encrypted = tmp_path / "in.ctz"
        result = runner.invoke(
            cli,
            [
                "encrypt",
                "--pubkey", str(key_dir / "paillier.pub"),
                "--image", str(tmp_path / "in.pgm"),
                "--out", str(encrypted),
                "--preview", str(tmp_path / "preview.pgm"),
                "--seed", "1",
            ],
        )
        assert result.exit_code == 0, result.output
        assert "87 header" in result.output
        assert read_pgm(tmp_path / "preview.pgm").shape == (4, 12)

        result = runner.invoke(
            cli,
            [
                "decrypt",
                "--privkey", str(key_dir / "paillier.key"),
                "--in", str(encrypted),
                "--out", str(tmp_path / "out.pgm"),
            ],
        )
        assert result.exit_code == 0, result.output
        assert np.allclose(read_pgm(tmp_path / "out.pgm"), image, atol=1e-4)

    def test_raw_input(self, runner: CliRunner, key_dir: Path, tmp_path: Path) -> None:
        (tmp_path / "in.raw").write_bytes(np.zeros((2, 3), dtype="<f4").tobytes())
        result = runner.invoke(
            cli,
            [
                "encrypt",
                "--pubkey", str(key_dir / "paillier.pub"),
                "--image", str(tmp_path / "in.raw"),
                "--raw", "2x3",
                "--out", str(tmp_path / "in.ctz"),
            ],
        )
        assert result.exit_code == 0, result.output
        assert "(1, 2, 3)" in result.output

    def test_bad_raw_shape(self, runner: CliRunner, key_dir: Path, tmp_path: Path) -> None:
        (tmp_path / "in.raw").write_bytes(b"\x00" * 4)
        result = runner.invoke(
            cli,
            [
                "encrypt",
                "--pubkey", str(key_dir / "paillier.pub"),
                "--image", str(tmp_path / "in.raw"),
                "--raw", "two-by-three",
                "--out", str(tmp_path / "in.ctz"),
            ],
        )
        assert result.exit_code == 1

    def test_foreign_key(self, runner: CliRunner, key_dir: Path, tmp_path: Path) -> None:
        write_pgm(tmp_path / "in.pgm", np.zeros((2, 2)))
        runner.invoke(
            cli,
            [
                "encrypt",
                "--pubkey", str(key_dir / "paillier.pub"),
                "--image", str(tmp_path / "in.pgm"),
                "--out", str(tmp_path / "in.ctz"),
            ],
        )
        runner.invoke(
            cli,
            [
                "keygen",
                "--bits", "128",
                "--seed", "2",
                "--name", "other",
                "--out-dir", str(key_dir),
            ],
        )
        result = runner.invoke(
            cli,
            [
                "decrypt",
                "--privkey", str(key_dir / "other.key"),
                "--in", str(tmp_path / "in.ctz"),
                "--out", str(tmp_path / "out.pgm"),
            ],
        )
        assert result.exit_code == 3
        assert "encrypted under" in result.output

    def test_unwritable_output(
        self, runner: CliRunner, key_dir: Path, blocker: Path, tmp_path: Path
    ) -> None:
        write_pgm(tmp_path / "in.pgm", np.zeros((2, 2)))
        result = runner.invoke(
            cli,
            [
                "encrypt",
                "--pubkey", str(key_dir / "paillier.pub"),
                "--image", str(tmp_path / "in.pgm"),
                "--out", str(blocker / "in.ctz"),
            ],
        )
        assert result.exit_code == 3
        assert "cannot write cipher tensor" in result.output


class TestVerifyCommand:
    def test_tiny_model_passes(self, runner: CliRunner, tiny_cdm: Path) -> None:
        result = runner.invoke(
            cli, ["verify", "--model", str(tiny_cdm), "--bits", "128", "--seeds", "2"]
        )
        assert result.exit_code == 0, result.output
        assert "seed 0: PASS" in result.output
        assert "seed 1: PASS" in result.output

    def test_key_size_floor(self, runner: CliRunner, tiny_cdm: Path) -> None:
        result = runner.invoke(cli, ["verify", "--model", str(tiny_cdm), "--bits", "32"])
        assert result.exit_code == 1

    def test_missing_model_file(self, runner: CliRunner, tmp_path: Path) -> None:
        result = runner.invoke(cli, ["verify", "--model", str(tmp_path / "absent.cdm")])
        assert result.exit_code == 3


class TestAttackCommand:
    def test_underdetermined_run(self, runner: CliRunner, tiny_cdm: Path, tmp_path: Path) -> None:
        out_dir = tmp_path / "attack"
        result = runner.invoke(
            cli,
            [
                "attack",
                "--model", str(tiny_cdm),
                "--probes", "1",
                "--probe-size", "3",
                "--key-bits", "128",
                "--out-dir", str(out_dir),
            ],
        )
        assert result.exit_code == 0, result.output
        assert "clean:" in result.output
        assert "perturbed:" in result.output
        assert "(underdetermined)" in result.output
        document = json.loads((out_dir / "attack_report.json").read_text())
        assert document["clean"]["underdetermined"] is True

    def test_linear_model_rejected(self, runner: CliRunner, tmp_path: Path) -> None:
        result = runner.invoke(
            cli, ["attack", "--model", "demo-linear", "--out-dir", str(tmp_path)]
        )
        assert result.exit_code == 1
        assert "linear" in result.output


class TestPhantomCommand:
    def test_writes_pairs(self, runner: CliRunner, tmp_path: Path) -> None:
        out_dir = tmp_path / "phantoms"
        result = runner.invoke(
            cli, ["phantom", "--count", "2", "--size", "16", "--out-dir", str(out_dir)]
        )
        assert result.exit_code == 0, result.output
        assert sorted(p.name for p in out_dir.iterdir()) == [
            "phantom_0000_clean.pgm",
            "phantom_0000_noisy.pgm",
            "phantom_0001_clean.pgm",
            "phantom_0001_noisy.pgm",
        ]

    def test_size_range(self, runner: CliRunner, tmp_path: Path) -> None:
        result = runner.invoke(cli, ["phantom", "--size", "4", "--out-dir", str(tmp_path)])
        assert result.exit_code == 1

    def test_unwritable_directory(self, runner: CliRunner, blocker: Path) -> None:
        result = runner.invoke(
            cli, ["phantom", "--count", "1", "--size", "8", "--out-dir", str(blocker / "p")]
        )
        assert result.exit_code == 3
        assert "cannot create" in result.output


class TestConfigFile:
    def test_file_supplies_defaults(self, runner: CliRunner, tmp_path: Path) -> None:
        config = tmp_path / "cipherdenoise.conf"
        config.write_text("# phantoms\nphantom.count=3\nphantom.size=8\nseed=4\n")
        out_dir = tmp_path / "p"
        result = runner.invoke(
            cli, ["--config", str(config), "phantom", "--out-dir", str(out_dir)]
        )
        assert result.exit_code == 0, result.output
        assert len(list(out_dir.iterdir())) == 6

    def test_flags_win(self, runner: CliRunner, tmp_path: Path) -> None:
        config = tmp_path / "cipherdenoise.conf"
        config.write_text("phantom.count=3\n")
        out_dir = tmp_path / "p"
        result = runner.invoke(
            cli,
            ["--config", str(config), "phantom", "--count", "1", "--size", "8",
             "--out-dir", str(out_dir)],
        )
        assert result.exit_code == 0, result.output
        assert len(list(out_dir.iterdir())) == 2

    def test_environment_variable(self, runner: CliRunner, tmp_path: Path) -> None:
        config = tmp_path / "cipherdenoise.conf"
        config.write_text("phantom.count=1\nphantom.size=8\n")
        out_dir = tmp_path / "p"
        result = runner.invoke(
            cli,
            ["phantom", "--out-dir", str(out_dir)],
            env={"CIPHERDENOISE_CONFIG": str(config)},
        )
        assert result.exit_code == 0, result.output
        assert len(list(out_dir.iterdir())) == 2

    def test_unknown_option(self, runner: CliRunner, tmp_path: Path) -> None:
        config = tmp_path / "cipherdenoise.conf"
        config.write_text("phantom.colour=red\n")
        result = runner.invoke(cli, ["--config", str(config), "phantom"])
        assert result.exit_code == 1
        assert "has no option" in result.output

    def test_unreadable_file(self, runner: CliRunner, tmp_path: Path) -> None:
        result = runner.invoke(cli, ["--config", str(tmp_path / "absent.conf"), "phantom"])
        assert result.exit_code == 3


class TestServeCommand:
    def test_budget_checked_before_listening(self, runner: CliRunner) -> None:
        result = runner.invoke(cli, ["serve", "--model", "demo", "--min-key-bits", "64"])
        assert result.exit_code == 1
        assert "bits" in result.output

    def test_bad_listen_address(self, runner: CliRunner) -> None:
        result = runner.invoke(cli, ["serve", "--model", "demo", "--listen", "nowhere"])
        assert result.exit_code == 1
        assert "HOST:PORT" in result.output

    def test_ledger_url_scheme(self, runner: CliRunner) -> None:
        result = runner.invoke(
            cli, ["serve", "--model", "demo", "--ledger-url", "http://localhost"]
        )
        assert result.exit_code == 1

    def test_builds_configured_server(self, runner: CliRunner, tiny_cdm: Path) -> None:
        with (
            patch("cipherdenoise.cli._serve") as serve_mock,
            patch("cipherdenoise.cli.asyncio.run") as run_mock,
        ):
            result = runner.invoke(
                cli,
                [
                    "serve",
                    "--model", str(tiny_cdm),
                    "--listen", "127.0.0.1:0",
                    "--max-sessions", "3",
                    "--seed", "9",
                ],
            )
        assert result.exit_code == 0, result.output
        run_mock.assert_called_once()
        server, host, port = serve_mock.call_args.args
        assert (host, port) == ("127.0.0.1", 0)
        assert server.model.name == "demo-redcnn"
        assert server.config.max_sessions == 3
        assert server.config.seed == 9
        assert server.ledger is None

    def test_ledger_ttl_reaches_ledger(
        self, runner: CliRunner, tiny_cdm: Path, fake_redis: FakeRedis
    ) -> None:
        with (
            patch("cipherdenoise.ledger.redis.from_url", return_value=fake_redis),
            patch("cipherdenoise.cli._serve") as serve_mock,
            patch("cipherdenoise.cli.asyncio.run"),
        ):
            result = runner.invoke(
                cli,
                [
                    "serve",
                    "--model", str(tiny_cdm),
                    "--ledger-url", "redis://localhost:6379/0",
                    "--ledger-ttl", "60",
                    "--name", "edge-1",
                ],
            )
        assert result.exit_code == 0, result.output
        server = serve_mock.call_args.args[0]
        assert server.ledger.ttl == 60
        assert server.ledger.key_prefix.endswith("edge-1:")


class TestSessionsCommand:
    def test_lists_records(self, runner: CliRunner, fake_redis: FakeRedis) -> None:
        with patch("cipherdenoise.ledger.redis.from_url", return_value=fake_redis):
            SessionLedger("redis://localhost:6379/0", "srv").record(
                SessionMetrics(session_id="ab" * 16, framework="nonlinear", outcome="ok")
            )
            result = runner.invoke(
                cli, ["sessions", "--ledger-url", "redis://localhost:6379/0", "--name", "srv"]
            )
        assert result.exit_code == 0, result.output
        records = [json.loads(line) for line in result.output.splitlines()]
        assert [r["session_id"] for r in records] == ["ab" * 16]
        assert records[0]["server"] == "srv"

    def test_unreachable_ledger(self, runner: CliRunner, fake_redis: FakeRedis) -> None:
        with (
            patch("cipherdenoise.ledger.redis.from_url", return_value=fake_redis),
            patch.object(fake_redis, "ping", side_effect=redis_module.ConnectionError("down")),
        ):
            result = runner.invoke(cli, ["sessions", "--ledger-url", "redis://localhost:1/0"])
        assert result.exit_code == 3
        assert "unreachable" in result.output

    def test_prune_drops_expired_entries(self, runner: CliRunner, fake_redis: FakeRedis) -> None:
        with patch("cipherdenoise.ledger.redis.from_url", return_value=fake_redis):
            ledger = SessionLedger("redis://localhost:6379/0", "srv")
            for session_id in ("aa" * 16, "bb" * 16):
                ledger.record(SessionMetrics(session_id=session_id, outcome="ok"))
            fake_redis.delete(ledger._get_key("aa" * 16))
            result = runner.invoke(
                cli,
                ["sessions", "--ledger-url", "redis://localhost:6379/0", "--name", "srv",
                 "--prune"],
            )
        assert result.exit_code == 0, result.output
        assert "pruned 1 sessions" in result.output
        records = [json.loads(line) for line in result.output.splitlines() if line.startswith("{")]
        assert [r["session_id"] for r in records] == ["bb" * 16]

    def test_older_than_keeps_recent_records(
        self, runner: CliRunner, fake_redis: FakeRedis
    ) -> None:
        with patch("cipherdenoise.ledger.redis.from_url", return_value=fake_redis):
            SessionLedger("redis://localhost:6379/0", "srv").record(
                SessionMetrics(session_id="cc" * 16, outcome="ok")
            )
            result = runner.invoke(
                cli,
                ["sessions", "--ledger-url", "redis://localhost:6379/0", "--name", "srv",
                 "--prune", "--older-than", "1"],
            )
        assert result.exit_code == 0, result.output
        assert "pruned 0 sessions" in result.output
        assert '"session_id": "' + "cc" * 16 in result.output


class TestDenoiseCommand:
    def test_matches_fixed_engine(
        self, runner: CliRunner, live_server, key_dir: Path, tiny_model, tiny_image, tmp_path: Path
    ) -> None:
        stream, finished = live_server
        write_pgm(tmp_path / "in.pgm", tiny_image)
        result = runner.invoke(
            cli,
            [
                "denoise",
                "--server", f"{stream.host}:{stream.port}",
                "--privkey", str(key_dir / "paillier.key"),
                "--image", str(tmp_path / "in.pgm"),
                "--out", str(tmp_path / "out.pgm"),
                "--timeout", "60",
                "--seed", "1",
            ],
        )
        assert result.exit_code == 0, result.output

        encoded = encode_image(tiny_model, read_pgm(tmp_path / "in.pgm"))
        expected = infer_plain_fixed(tiny_model, encoded)
        pixels = dequantize_array(expected.data, expected.scale)[0]
        assert (tmp_path / "out.pgm").read_bytes() == encode_pgm(pixels)

        assert len(finished) == 1
        server_metrics = finished[0]
        assert server_metrics.outcome == "ok"
        counters = _counters(result.output)
        assert counters["framework"] == "nonlinear"
        assert int(counters["upload (bytes)"]) == server_metrics.up_bytes
        assert int(counters["download (bytes)"]) == server_metrics.down_bytes
        assert int(counters["activation round trips"]) == server_metrics.act_round_trips == 2

    def test_wrong_model_name(
        self, runner: CliRunner, live_server, key_dir: Path, tiny_image, tmp_path: Path
    ) -> None:
        stream, finished = live_server
        write_pgm(tmp_path / "in.pgm", tiny_image)
        result = runner.invoke(
            cli,
            [
                "denoise",
                "--server", f"{stream.host}:{stream.port}",
                "--privkey", str(key_dir / "paillier.key"),
                "--image", str(tmp_path / "in.pgm"),
                "--out", str(tmp_path / "out.pgm"),
                "--model-name", "some-other-model",
                "--timeout", "60",
            ],
        )
        assert result.exit_code == 4
        assert not (tmp_path / "out.pgm").exists()

    def test_nothing_listening(self, runner: CliRunner, key_dir: Path, tmp_path: Path) -> None:
        write_pgm(tmp_path / "in.pgm", np.zeros((6, 6)))
        result = runner.invoke(
            cli,
            [
                "denoise",
                "--server", "127.0.0.1:1",
                "--privkey", str(key_dir / "paillier.key"),
                "--image", str(tmp_path / "in.pgm"),
                "--out", str(tmp_path / "out.pgm"),
                "--timeout", "5",
            ],
        )
        assert result.exit_code == 4
        assert "cannot reach" in result.output
        assert not (tmp_path / "out.pgm").exists()
