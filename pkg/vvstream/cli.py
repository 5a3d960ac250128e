"""Command-line entry points: generate, stream, report, trace-check and serve."""
from __future__ import annotations

import json
import logging
import os

import click
from flask import Flask, current_app

from vvstream.channel import BandwidthTrace, ChannelModel
from vvstream.errors import ConfigurationError, ScriptError, VVStreamError
from vvstream.pipeline import Pipeline, PipelineConfig, open_input
from vvstream.ply import write_ply
from vvstream.report import build_report, write_report
from vvstream.scene_reuse import export_heatmap, load_viewport_trace, saliency_table
from vvstream.session import StreamClient, run_session
from vvstream.sessionlog import SessionLog, get_log_path
from vvstream.vabr import DECISION_HEADER

logger = logging.getLogger(__name__)

USAGE_EXIT = 1
RUN_CONFIG = 'run_config.json'


class StreamCLI(click.Group):
    """Maps usage errors to exit 1 and pipeline errors to their own exit codes."""

    def make_context(self, info_name, args, parent=None, **extra):
        try:
            return super().make_context(info_name, args, parent=parent, **extra)
        except click.UsageError as e:
            e.exit_code = USAGE_EXIT
            raise

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except click.UsageError as e:
            e.exit_code = USAGE_EXIT
            raise
        except VVStreamError as e:
            logger.error(f'{type(e).__name__}: {e}')
            click.echo(f'Error: {e}', err=True)
            ctx.exit(e.exit_code)


def run_options(f):
    """--seed and --config, accepted by every command."""
    f = click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False),
                     help='JSON file of config keys overlaid on the app config.')(f)
    return click.option('--seed', type=int, default=None, help='Override the random seed.')(f)


def load_overlay(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding='utf-8') as fid:
            overlay = json.load(fid)
    except OSError as e:
        raise ConfigurationError(f'{path}: cannot read config: {e.strerror}')
    except json.JSONDecodeError as e:
        raise ConfigurationError(f'{path}:{e.lineno}: {e.msg}')
    if not isinstance(overlay, dict):
        raise ConfigurationError(f'{path}: config must be a JSON object')
    return {str(k).upper(): v for k, v in overlay.items()}


def pipeline_config(config_path, **overrides) -> PipelineConfig:
    mapping = dict(current_app.config)
    mapping.update(load_overlay(config_path))
    return PipelineConfig.from_mapping(mapping, **overrides)


def write_run_config(out_dir, command, cfg: PipelineConfig | None = None, **arguments):
    os.makedirs(out_dir, exist_ok=True)
    resolved = {'command': command, 'arguments': arguments}
    if cfg is not None:
        resolved['config'] = cfg.to_dict()
    path = os.path.join(out_dir, RUN_CONFIG)
    with open(path, 'w', encoding='utf-8') as fid:
        json.dump(resolved, fid, indent=2, sort_keys=True)
        fid.write('\n')
    return path


@click.group(cls=StreamCLI)
@click.pass_context
def cli(ctx):
    """Live volumetric video streaming: capture simulation, streaming sessions and reports."""
    if not isinstance(ctx.obj, Flask):
        from vvstream import create_app
        ctx.obj = create_app()
    ctx.with_resource(ctx.obj.app_context())


@cli.command('generate')
@click.argument('script', type=click.Path(exists=True, dir_okay=False))
@click.option('--out', 'out_dir', required=True, type=click.Path(file_okay=False))
@click.option('--frames', type=click.IntRange(min=0), default=None, help='Stop after this many frames.')
@run_options
def generate(script, out_dir, frames, seed, config_path):
    """Render a scene script into per-camera PLY sequences plus a manifest."""
    from vvstream.capture import Manifest, ManifestEntry, parse_script, synth_scene

    try:
        with open(script, encoding='utf-8') as fid:
            text = fid.read()
    except OSError as e:
        raise ScriptError(f'cannot read script: {e.strerror}', script)
    if seed is not None:
        try:
            doc = json.loads(text)
        except json.JSONDecodeError:
            doc = None
        if isinstance(doc, dict):
            doc['seed'] = seed
            text = json.dumps(doc)
    scene = parse_script(text, script)
    count = scene.frame_count if frames is None else min(frames, scene.frame_count)

    os.makedirs(out_dir, exist_ok=True)
    manifest = Manifest(fps=scene.fps, world_from_master=scene.world_from_master())
    for cid in scene.camera_ids:
        os.makedirs(os.path.join(out_dir, f'camera_{cid}'), exist_ok=True)
        manifest.cameras[cid] = []
    for index in range(count):
        for cid, frame in sorted(synth_scene(scene, scene.timestamp(index)).items()):
            name = f'camera_{cid}/frame_{index:05d}.ply'
            write_ply(os.path.join(out_dir, name), frame.cloud)
            skeleton = frame.skeleton.to_rows() if frame.skeleton is not None else None
            manifest.cameras[cid].append(ManifestEntry(frame.timestamp, name, skeleton))

    with open(os.path.join(out_dir, 'manifest.json'), 'w', encoding='utf-8') as fid:
        json.dump(manifest.to_json(), fid, indent=1, sort_keys=True)
    truth = {
        'master_camera': scene.master_id,
        'master_from_sub': {str(cid): t.as_matrix().tolist()
                            for cid, t in sorted(scene.ground_truth_transforms().items())},
        'static_points': scene.static_point_count,
        'frames': count,
        'fps': scene.fps,
    }
    with open(os.path.join(out_dir, 'ground_truth.json'), 'w', encoding='utf-8') as fid:
        json.dump(truth, fid, indent=1, sort_keys=True)
    write_run_config(out_dir, 'generate', script=os.fspath(script), frames=count, seed=scene.seed,
                     overlay=load_overlay(config_path))

    written = sum(len(entries) for entries in manifest.cameras.values())
    current_app.logger.info(f'generated {written} frames for {len(scene.camera_ids)} cameras in {out_dir}')
    click.echo(f'{written} frames written to {out_dir}')


@cli.command('stream')
@click.argument('input_path', type=click.Path(exists=True, dir_okay=False))
@click.option('--out', 'out_dir', required=True, type=click.Path(file_okay=False))
@click.option('--bandwidth-trace', type=click.Path(exists=True, dir_okay=False),
              help='CSV of (time_s, mbps); omitted means unlimited bandwidth.')
@click.option('--viewport-trace', type=click.Path(exists=True, dir_okay=False))
@click.option('--preset', default=None,
              help='Decimation preset name, or ratios such as head=0.5,chest=0.25,arm=0.15,leg=0.25.')
@click.option('--frames', type=click.IntRange(min=1), default=None)
@run_options
def stream(input_path, out_dir, bandwidth_trace, viewport_trace, preset, frames, seed, config_path):
    """Run a full streaming session from a scene script or a recorded manifest."""
    source = open_input(input_path, frames)
    cfg = pipeline_config(config_path, seed=seed, preset=preset, fps=source.fps)
    write_run_config(out_dir, 'stream', cfg, input=os.fspath(input_path), bandwidth_trace=bandwidth_trace,
                     viewport_trace=viewport_trace, frames=frames)

    trace = BandwidthTrace.from_csv(bandwidth_trace) if bandwidth_trace else BandwidthTrace.unlimited_trace()
    viewport = load_viewport_trace(viewport_trace) if viewport_trace else []
    channel = ChannelModel(trace, cfg.propagation_ms / 1000.0, cfg.loss_rate, seed=cfg.seed)
    client = StreamClient(viewport, cfg.chunk_seconds, cfg.snapshot_every)
    with SessionLog(get_log_path(out_dir)) as log:
        pipeline = Pipeline(cfg, source.sources, source.world_from_master, log)
        result = run_session(pipeline, channel, client, cfg, log)

    with open(os.path.join(out_dir, 'decisions.tsv'), 'w', encoding='utf-8') as fid:
        fid.write('\n'.join([DECISION_HEADER] + [d.to_line() for d in result.decisions]) + '\n')
    snapshot_dir = os.path.join(out_dir, 'snapshots')
    for chunk, cloud in sorted(result.snapshots.items()):
        os.makedirs(snapshot_dir, exist_ok=True)
        write_ply(os.path.join(snapshot_dir, f'chunk_{chunk:05d}.ply'), cloud)
    if viewport:
        export_heatmap(saliency_table(pipeline.reuse), os.path.join(out_dir, 'saliency.csv'))

    current_app.logger.info(f'session finished: {result.chunks} chunks, consistent={result.consistent}')
    click.echo(f'{result.chunks} chunks streamed, {result.delivered_bytes} bytes delivered, '
               f'QoE {result.qoe if result.qoe is not None else "-"}')


@cli.command('report')
@click.argument('logs', nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
@click.option('--out', 'out_dir', required=True, type=click.Path(file_okay=False))
@run_options
def report(logs, out_dir, seed, config_path):
    """Aggregate session logs into latency, bandwidth and saving tables (CSV)."""
    tables = build_report(list(logs))
    written = write_report(tables, out_dir)
    write_run_config(out_dir, 'report', logs=[os.fspath(p) for p in logs], overlay=load_overlay(config_path))
    for path in written:
        click.echo(path)


@cli.command('trace-check')
@click.argument('path', type=click.Path(exists=True, dir_okay=False))
@click.option('--kind', type=click.Choice(['bandwidth', 'viewport']), default='bandwidth', show_default=True)
@run_options
def trace_check(path, kind, seed, config_path):
    """Validate a bandwidth or viewport trace file."""
    if kind == 'bandwidth':
        trace = BandwidthTrace.from_csv(path)
        start, end = float(trace.times[0]), float(trace.times[-1])
        click.echo(f'{len(trace.times)} points over {end - start:g} s, '
                   f'mean {trace.mean_mbps(start, end):.3f} Mbps')
    else:
        samples = load_viewport_trace(path)
        span = (samples[-1].timestamp - samples[0].timestamp) / 1e6 if samples else 0.0
        click.echo(f'{len(samples)} viewport samples over {span:g} s')


@cli.command('serve')
@click.argument('input_path', type=click.Path(exists=True, dir_okay=False))
@click.option('--host', default='127.0.0.1', show_default=True)
@click.option('--port', type=int, default=5000, show_default=True)
@click.option('--preset', default=None)
@click.option('--frames', type=click.IntRange(min=1), default=None)
@click.option('--out', 'out_dir', type=click.Path(file_okay=False), default=None,
              help='Write the session log and run config here.')
@run_options
def serve(input_path, host, port, preset, frames, out_dir, seed, config_path):
    """Serve a stream over HTTP with the same binary framing."""
    from vvstream import server

    source = open_input(input_path, frames)
    cfg = pipeline_config(config_path, seed=seed, preset=preset, fps=source.fps)
    log = SessionLog()
    if out_dir is not None:
        write_run_config(out_dir, 'serve', cfg, input=os.fspath(input_path), frames=frames)
        log = SessionLog(get_log_path(out_dir))
    app = current_app._get_current_object()
    with log:
        server.init_app(app, server.StreamHub(Pipeline(cfg, source.sources, source.world_from_master, log), cfg))
        app.run(host=host, port=port, debug=False)


def main():
    cli(prog_name='vvstream')
