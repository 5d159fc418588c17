"""Operator command line: keys, images, serving, client runs, verification, attacks.

Every option can also come from the file named by ``CIPHERDENOISE_CONFIG``
(see :mod:`cipherdenoise.config`); flags win over the file.
"""

import asyncio
import contextlib
import json
import logging
import random
import signal
import sys
import time
from pathlib import Path
from typing import Any

import click
import numpy as np

from cipherdenoise import __version__
from cipherdenoise.attacks import (
    CLEAN,
    PERTURBED,
    AttackConfig,
    run_attack_experiment,
    write_attack_report,
)
from cipherdenoise.ciphertensor import (
    PlainTensor,
    encrypt_tensor,
    header_size,
    load_ctz,
    save_ctz,
)
from cipherdenoise.config import CONFIG_ENV, default_map, read_config
from cipherdenoise.encoding import DEFAULT_FRAC_BITS, ScaleTag, dequantize_array, quantize_array
from cipherdenoise.errors import (
    EXIT_IO,
    EXIT_USAGE,
    CipherDenoiseError,
    KeyMismatchError,
    StorageError,
)
from cipherdenoise.imageio import load_image, normalize_for_display, side_by_side, write_pgm
from cipherdenoise.ledger import DEFAULT_RECORD_TTL, SessionLedger, ledger_enabled
from cipherdenoise.model import ModelSpec, demo_linear_model, demo_model, load_model, save_model
from cipherdenoise.paillier import (
    DEFAULT_KEY_BITS,
    keygen,
    load_private_key,
    load_public_key,
    save_private_key,
    save_public_key,
)
from cipherdenoise.phantom import add_noise, ellipse_phantom, generate_pairs, psnr, write_pairs
from cipherdenoise.protocol import (
    ClientConfig,
    InferenceClient,
    InferenceServer,
    PerturbanceMode,
    ServerConfig,
    StreamServer,
    decrypt_tensor,
    denoise_remote,
)
from cipherdenoise.protocol.activation import DEFAULT_PERTURBANCE_BOUND
from cipherdenoise.protocol.session import DEFAULT_MAX_SESSIONS, DEFAULT_MIN_KEY_BITS
from cipherdenoise.verify import check_verification, verify_model

logger = logging.getLogger(__name__)

DEFAULT_LISTEN = "127.0.0.1:7433"
BUILTIN_MODELS = {"demo": demo_model, "demo-linear": demo_linear_model}
PREVIEW_MODULUS = 1 << 16


class CipherDenoiseGroup(click.Group):
    """Maps package errors and usage errors onto the stable exit codes."""

    def make_context(self, *args: Any, **kwargs: Any) -> click.Context:
        try:
            return super().make_context(*args, **kwargs)
        except click.UsageError as exc:
            exc.exit_code = EXIT_USAGE
            raise

    def invoke(self, ctx: click.Context) -> Any:
        try:
            return super().invoke(ctx)
        except click.UsageError as exc:
            exc.exit_code = EXIT_USAGE
            raise
        except CipherDenoiseError as exc:
            logger.debug("[cipherdenoise] command failed", exc_info=True)
            click.echo(f"Error: {exc}", err=True)
            ctx.exit(exc.exit_code)


def _resolve_model(name: str) -> ModelSpec:
    """A built-in demo name or a ``.cdm`` path."""
    builder = BUILTIN_MODELS.get(name)
    if builder is not None:
        return builder()
    return load_model(name)


def _parse_listen(value: str) -> tuple[str, int]:
    host, sep, port = value.rpartition(":")
    if not sep or not port.isdigit():
        raise click.BadParameter(f"expected HOST:PORT, got {value!r}")
    return host or "127.0.0.1", int(port)


def _parse_shape(value: str | None) -> tuple[int, int] | None:
    if value is None:
        return None
    height, sep, width = value.lower().partition("x")
    if not sep or not height.isdigit() or not width.isdigit():
        raise click.BadParameter(f"expected HEIGHTxWIDTH, got {value!r}")
    return int(height), int(width)


def _encode(image: np.ndarray, frac_bits: int) -> PlainTensor:
    arr = np.asarray(image, dtype=np.float64).reshape(1, *image.shape[-2:])
    return PlainTensor(arr.shape, quantize_array(arr, frac_bits), ScaleTag(frac_bits))


@click.group(cls=CipherDenoiseGroup)
@click.version_option(__version__, prog_name="cipherdenoise")
@click.option(
    "--log-level",
    type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False),
    default="WARNING",
    show_default=True,
)
@click.option(
    "--config",
    "config_path",
    type=click.Path(dir_okay=False),
    envvar=CONFIG_ENV,
    help="key=value file supplying option defaults.",
)
@click.pass_context
def cli(ctx: click.Context, log_level: str, config_path: str | None) -> None:
    """Paillier-encrypted CNN denoising of CT slices."""
    logging.basicConfig(
        level=getattr(logging, log_level.upper()),
        format="%(asctime)s %(levelname)s %(name)s %(message)s",
    )
    assert isinstance(ctx.command, click.Group)
    ctx.default_map = default_map(read_config(config_path or ""), ctx.command.commands)


@cli.command("keygen")
@click.option("--bits", type=int, default=DEFAULT_KEY_BITS, show_default=True)
@click.option("--out-dir", type=click.Path(file_okay=False), default=".", show_default=True)
@click.option("--name", default="paillier", show_default=True, help="Key file stem.")
@click.option("--seed", type=int, default=None, help="Deterministic keys, for tests only.")
def keygen_cmd(bits: int, out_dir: str, name: str, seed: int | None) -> None:
    """Write <name>.pub and <name>.key."""
    rng = random.Random(f"keygen:{seed}") if seed is not None else None
    pk, sk = keygen(bits, rng)
    directory = Path(out_dir)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise StorageError(f"cannot create key directory {directory}: {exc}") from exc
    save_public_key(pk, directory / f"{name}.pub")
    save_private_key(sk, directory / f"{name}.key")
    click.echo(f"{pk.bits}-bit key {pk.fingerprint}")


@cli.command()
@click.option("--pubkey", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--image", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option(
    "--frac-bits", type=click.IntRange(0, 256), default=DEFAULT_FRAC_BITS, show_default=True
)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@click.option("--raw", "raw_shape", default=None, help="Raw float32 slice of HEIGHTxWIDTH.")
@click.option("--preview", type=click.Path(dir_okay=False), default=None)
@click.option("--seed", type=int, default=None)
def encrypt(
    pubkey: str,
    image: str,
    frac_bits: int,
    out: str,
    raw_shape: str | None,
    preview: str | None,
    seed: int | None,
) -> None:
    """Encrypt an image into a .ctz cipher tensor."""
    pk = load_public_key(pubkey)
    pixels = load_image(image, _parse_shape(raw_shape))
    rng = random.Random(f"encrypt:{seed}") if seed is not None else None
    tensor = encrypt_tensor(pk, _encode(pixels, frac_bits), rng)
    written = save_ctz(pk, tensor, out)
    if preview is not None:
        residues = np.vectorize(lambda v: int(v) % PREVIEW_MODULUS, otypes=[np.float64])(
            tensor.values[0]
        )
        write_pgm(preview, side_by_side([pixels, normalize_for_display(residues)]))
    click.echo(f"{out}: {written} bytes ({header_size()} header), shape {tensor.shape}")


@cli.command()
@click.option("--privkey", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--in", "in_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--scale", type=int, default=None, help="Override the fractional bits in the header.")
@click.option("--out", type=click.Path(dir_okay=False), required=True)
def decrypt(privkey: str, in_path: str, scale: int | None, out: str) -> None:
    """Decrypt a .ctz and write it as a PGM."""
    sk = load_private_key(privkey)
    pk = sk.public_key
    tensor = load_ctz(in_path)
    if tensor.key_id != pk.fingerprint:
        raise KeyMismatchError(
            f"{in_path} was encrypted under {tensor.key_id[:12]}, "
            f"this key is {pk.fingerprint[:12]}"
        )
    plain = decrypt_tensor(pk, sk, tensor)
    tag = plain.scale if scale is None else ScaleTag(scale)
    write_pgm(out, dequantize_array(plain.data, tag)[0])
    click.echo(f"{out}: {tensor.shape} at 2^-{tag.total_frac_bits}")


@cli.command()
@click.option("--model", "model_name", required=True, help="A .cdm file, 'demo' or 'demo-linear'.")
@click.option("--listen", default=DEFAULT_LISTEN, show_default=True)
@click.option(
    "--max-sessions", type=click.IntRange(1), default=DEFAULT_MAX_SESSIONS, show_default=True
)
@click.option(
    "--min-key-bits", type=click.IntRange(16), default=DEFAULT_MIN_KEY_BITS, show_default=True
)
@click.option(
    "--perturbance",
    type=click.Choice([m.value for m in PerturbanceMode]),
    default=PerturbanceMode.RANDOM.value,
    show_default=True,
)
@click.option(
    "--perturbance-bound",
    type=click.IntRange(1),
    default=DEFAULT_PERTURBANCE_BOUND,
    show_default=True,
)
@click.option("--ledger-url", default=None, help="redis:// URL recording finished sessions.")
@click.option(
    "--ledger-ttl",
    type=click.IntRange(0),
    default=DEFAULT_RECORD_TTL,
    show_default=True,
    help="Seconds a ledger record lives; 0 keeps records forever.",
)
@click.option("--name", default="cipherdenoise", show_default=True, help="Ledger server name.")
@click.option("--seed", type=int, default=None)
def serve(
    model_name: str,
    listen: str,
    max_sessions: int,
    min_key_bits: int,
    perturbance: str,
    perturbance_bound: int,
    ledger_url: str | None,
    ledger_ttl: int,
    name: str,
    seed: int | None,
) -> None:
    """Serve encrypted inference until SIGINT or SIGTERM."""
    host, port = _parse_listen(listen)
    if ledger_url and not ledger_enabled(ledger_url):
        raise click.BadParameter("only redis:// and rediss:// URLs", param_hint="--ledger-url")
    model = _resolve_model(model_name)
    config = ServerConfig(
        perturbance_bound=perturbance_bound,
        perturbance=PerturbanceMode(perturbance),
        seed=seed,
        max_sessions=max_sessions,
        min_key_bits=min_key_bits,
        name=name,
    )
    ledger = SessionLedger(ledger_url, name, ttl=ledger_ttl) if ledger_url else None
    server = InferenceServer(model, config, ledger)
    server.validate_startup(min_key_bits)
    try:
        asyncio.run(_serve(server, host, port))
    finally:
        if ledger is not None:
            ledger.close()


async def _serve(server: InferenceServer, host: str, port: int) -> None:
    stream = StreamServer(server, host, port)
    bound_host, bound_port = await stream.start()
    click.echo(f"serving {server.model.name} on {bound_host}:{bound_port}")
    stop = asyncio.Event()
    loop = asyncio.get_running_loop()
    for signum in (signal.SIGINT, signal.SIGTERM):
        with contextlib.suppress(NotImplementedError):
            loop.add_signal_handler(signum, stop.set)
    await stream.serve_until(stop)


@cli.command()
@click.option("--server", "address", default=DEFAULT_LISTEN, show_default=True)
@click.option("--privkey", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--pubkey", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--image", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@click.option("--raw", "raw_shape", default=None, help="Raw float32 slice of HEIGHTxWIDTH.")
@click.option(
    "--frac-bits", type=click.IntRange(0, 256), default=DEFAULT_FRAC_BITS, show_default=True
)
@click.option("--model-name", default="", help="Refuse unless the server serves this model.")
@click.option("--timeout", type=float, default=None)
@click.option("--seed", type=int, default=None)
def denoise(
    address: str,
    privkey: str,
    pubkey: str | None,
    image: str,
    out: str,
    raw_shape: str | None,
    frac_bits: int,
    model_name: str,
    timeout: float | None,
    seed: int | None,
) -> None:
    """Denoise an image on a remote server without revealing it."""
    host, port = _parse_listen(address)
    sk = load_private_key(privkey)
    pk = load_public_key(pubkey) if pubkey else sk.public_key
    client = InferenceClient(pk, sk, ClientConfig(seed=seed, frac_bits=frac_bits))
    pixels = load_image(image, _parse_shape(raw_shape))
    result = denoise_remote(client, _encode(pixels, frac_bits), host, port, model_name, timeout)
    output = dequantize_array(result.output.data, result.output.scale)
    write_pgm(out, output[0])
    click.echo(result.client_metrics.table())


@cli.command()
@click.option("--model", "model_name", default="demo", show_default=True)
@click.option("--image", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--bits", type=click.IntRange(64), default=512, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--seeds", type=click.IntRange(1), default=1, help="Run seed..seed+N-1.")
@click.option("--noise-sigma", type=float, default=10.0, show_default=True)
def verify(
    model_name: str, image: str | None, bits: int, seed: int, seeds: int, noise_sigma: float
) -> None:
    """Check the encrypted pipeline is integer-identical to the reference engine."""
    model = _resolve_model(model_name)
    pk, sk = keygen(bits, random.Random(f"verify:{seed}"))
    pixels = load_image(image) if image else None
    for run_seed in range(seed, seed + seeds):
        if pixels is None:
            rng = np.random.default_rng(run_seed)
            slice_ = add_noise(ellipse_phantom(model.input_shape[1], rng), noise_sigma, rng)
        else:
            slice_ = pixels
        report = verify_model(model, slice_, pk, sk, seed=run_seed)
        click.echo(f"seed {run_seed}: {report.summary()}")
        check_verification(report)


@cli.command()
@click.option("--model", "model_name", default="demo", show_default=True)
@click.option(
    "--mode", type=click.Choice([CLEAN, PERTURBED, "both"]), default="both", show_default=True
)
@click.option("--probes", type=click.IntRange(0), default=8, show_default=True)
@click.option("--probe-size", type=click.IntRange(3), default=8, show_default=True)
@click.option("--key-bits", type=click.IntRange(64), default=256, show_default=True)
@click.option("--fixed-m", is_flag=True, help="Reuse one perturbance matrix per layer.")
@click.option("--out-dir", type=click.Path(file_okay=False), default="attack", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
def attack(
    model_name: str,
    mode: str,
    probes: int,
    probe_size: int,
    key_bits: int,
    fixed_m: bool,
    out_dir: str,
    seed: int,
) -> None:
    """Least-squares weight stealing from what a client observes."""
    model = _resolve_model(model_name)
    modes = (CLEAN, PERTURBED) if mode == "both" else (mode,)
    config = AttackConfig(
        probes=probes,
        probe_size=probe_size,
        seed=seed,
        key_bits=key_bits,
        fixed_m=fixed_m,
        modes=modes,
    )
    result = run_attack_experiment(model, config)
    path = write_attack_report(result, out_dir)
    for name, report in result.reports.items():
        note = " (underdetermined)" if report.underdetermined else ""
        click.echo(
            f"{name}: weight_relative_error={report.weight_relative_error:.3e} "
            f"output_psnr={report.output_psnr_db:.2f} dB{note}"
        )
    click.echo(f"report written to {path}")


@cli.command()
@click.option("--count", type=click.IntRange(1), default=8, show_default=True)
@click.option("--size", type=click.IntRange(8, 1024), default=64, show_default=True)
@click.option("--noise-sigma", type=click.FloatRange(0.0), default=10.0, show_default=True)
@click.option("--out-dir", type=click.Path(file_okay=False), default="phantoms", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
def phantom(count: int, size: int, noise_sigma: float, out_dir: str, seed: int) -> None:
    """Write clean/noisy ellipse phantom pairs."""
    pairs = generate_pairs(count, size, noise_sigma, seed)
    write_pairs(pairs, out_dir)
    scores = [psnr(p.clean, p.noisy) for p in pairs]
    click.echo(f"{count} pairs in {out_dir}, mean noisy PSNR {np.mean(scores):.2f} dB")


@cli.command()
@click.option("--count", type=click.IntRange(1, 500), default=64, show_default=True)
@click.option("--holdout", type=click.IntRange(1), default=8, show_default=True)
@click.option("--size", type=click.IntRange(8, 64), default=32, show_default=True)
@click.option("--noise-sigma", type=click.FloatRange(0.0), default=10.0, show_default=True)
@click.option("--epochs", type=click.IntRange(1), default=30, show_default=True)
@click.option("--learning-rate", type=click.FloatRange(0.0), default=0.01, show_default=True)
@click.option("--channels", type=click.IntRange(1), default=8, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
def train(
    count: int,
    holdout: int,
    size: int,
    noise_sigma: float,
    epochs: int,
    learning_rate: float,
    channels: int,
    seed: int,
    out: str,
) -> None:
    """Train the demo denoiser on phantoms and save it as .cdm."""
    from cipherdenoise.training import TrainConfig, evaluate_psnr, fit

    pairs = generate_pairs(count + holdout, size, noise_sigma, seed)
    config = TrainConfig(
        epochs=epochs, learning_rate=learning_rate, seed=seed, channels=channels
    )
    run = fit(pairs[:count], config)
    save_model(run.model, out)
    before, after = evaluate_psnr(run.model, pairs[count:])
    click.echo(f"final loss {run.losses[-1]:.6g}; held-out PSNR {before:.2f} -> {after:.2f} dB")


@cli.command()
@click.option("--ledger-url", required=True)
@click.option("--name", default="cipherdenoise", show_default=True)
@click.option("--prune", is_flag=True, help="Drop index entries whose record expired first.")
@click.option(
    "--older-than",
    type=click.FloatRange(0.0),
    default=None,
    help="With --prune, also drop records finished more than this many days ago.",
)
def sessions(ledger_url: str, name: str, prune: bool, older_than: float | None) -> None:
    """List sessions a server recorded in its ledger."""
    if not ledger_enabled(ledger_url):
        raise click.BadParameter("only redis:// and rediss:// URLs", param_hint="--ledger-url")
    ledger = SessionLedger(ledger_url, name)
    try:
        if not ledger.ping():
            click.echo(f"Error: ledger at {ledger_url} is unreachable", err=True)
            sys.exit(EXIT_IO)
        if prune:
            cutoff = None if older_than is None else time.time() - older_than * 86400
            click.echo(f"pruned {ledger.prune(cutoff)} sessions", err=True)
        for session_id in ledger.list_sessions():
            record = ledger.get_session(session_id)
            if record is not None:
                click.echo(json.dumps(record, sort_keys=True))
    finally:
        ledger.close()


def main() -> None:
    cli(prog_name="cipherdenoise")
