'''
This module contains the command-line surface: create, read, write, fuzz,
bench, trace, verify and attack. Reports are printed as line-oriented text;
--summary additionally writes them as JSON.

'''

import argparse
import json
import logging
import os
import sys

import matplotlib
import pandas as pd

from . import bench as benchmod
from . import verifier
from .baselines import free_choice_rate, run_attack
from .container import ContainerConfig, create, open_container
from .crypto import KEY_ENV, CipherKey, load_key
from .device import READ, WRITE, filter_writes, read_trace, write_trace
from .errors import WoramError
from .layout import MODES
from .trie import feasibility_boundary
from .visualizations import plot_bench_ratios, plot_write_pattern

DESCRIPTION = 'Deterministic write-only ORAM containers, baselines and obliviousness checks.'


def _common():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('-v', '--verbose', action='store_true', help='log at DEBUG level')
    common.add_argument('--key', help='raw 32-byte key file (default: $DETWORAM_KEY_FILE)')
    common.add_argument('--summary', help='also write the report as JSON to this file')
    common.add_argument('--seed', type=int, default=0)
    common.add_argument('--lazy-state', action='store_true', help='persist client state on close only')
    return common


def _geometry_args(parser):
    parser.add_argument('--config', help='ContainerConfig JSON; flags given explicitly override it')
    parser.add_argument('--size-blocks', type=int)
    parser.add_argument('--ratio', type=int, choices=[1, 2, 3])
    parser.add_argument('--branch', type=int)
    parser.add_argument('--mode', choices=MODES)
    parser.add_argument('--block-bytes', type=int)
    parser.add_argument('--k', type=int, help='HiVE writes per logical write')


def build_parser():
    parser = argparse.ArgumentParser(prog='detworam', description=DESCRIPTION)
    common = _common()
    sub = parser.add_subparsers(dest='command')
    sub.required = True

    p = sub.add_parser('create', parents=[common], help='create a container')
    p.add_argument('container')
    _geometry_args(p)

    p = sub.add_parser('read', parents=[common], help='read one logical block')
    p.add_argument('container')
    p.add_argument('--address', type=int, required=True)
    p.add_argument('--out', help='write the block here instead of printing its hex')

    p = sub.add_parser('write', parents=[common], help='write one logical block')
    p.add_argument('container')
    p.add_argument('--address', type=int, required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument('--data-file', help='file holding exactly one block')
    group.add_argument('--fill', type=int, help='byte value repeated over the block')

    p = sub.add_parser('fuzz', parents=[common], help='random workload against a reference map')
    p.add_argument('container')
    p.add_argument('--ops', type=int, default=10000)
    p.add_argument('--reopen-every', type=int)

    p = sub.add_parser('bench', parents=[common], help='run a workload and report op counts')
    p.add_argument('container')
    p.add_argument('--workload', choices=benchmod.WORKLOADS, default=benchmod.SEQ_W)
    p.add_argument('--ops', type=int, default=10000)
    p.add_argument('--trace', help='record the physical trace to this file')
    p.add_argument('--csv', help='append the result table to this CSV file')
    p.add_argument('--plot', help='save a write-pattern plot (needs --trace)')
    p.add_argument('--ratios-plot', help='save a bar plot of every result in the --csv file')

    p = sub.add_parser('trace', parents=[common], help='summarise or WRITE-filter a trace file')
    p.add_argument('trace_file')
    p.add_argument('--writes-only', help='write the WRITE-filtered trace to this file')
    p.add_argument('--plot', help='save a write-pattern plot')

    p = sub.add_parser('verify', parents=[common], help='obliviousness checks')
    p.add_argument('--check', choices=['det', 'budget', 'read', 'snapshot', 'uniform'], required=True)
    p.add_argument('--traces', nargs='+', help='trace files; det/budget/read/uniform run on these when given')
    p.add_argument('--bound', type=float, default=2.5, help='budget: payload writes per logical write')
    p.add_argument('--sequences', type=int, default=20, help='generated sequences when no traces are given')
    p.add_argument('--writes', type=int, default=500, help='writes per generated sequence, also the reads for read')
    p.add_argument('--every', type=int, default=100, help='snapshot: writes between snapshots')
    p.add_argument('--offset', type=int, help='uniform: first physical index of the tested region')
    p.add_argument('--length', type=int, help='uniform: length of the tested region')
    p.add_argument('--report', help='write the text report to this file as well')
    _geometry_args(p)

    p = sub.add_parser('attack', parents=[common], help='DataLair distinguishing attack')
    p.add_argument('--scheme', choices=['datalair'], default='datalair')
    p.add_argument('--n', type=int, default=64)
    p.add_argument('--k', type=int, default=3)
    p.add_argument('--trials', type=int, default=10 ** 6)
    p.add_argument('--jobs', type=int, default=1)
    p.add_argument('--free-choice', type=int, default=0, help='also estimate the free-slot rate over this many writes')

    p = sub.add_parser('feasibility', parents=[common], help='largest N whose trie nodes fit half a block')
    p.add_argument('--branch', type=int, default=2)
    p.add_argument('--block-bits', type=int, default=2 ** 15)

    return parser


def config_from_args(args, path=None):
    config = ContainerConfig.from_json(args.config) if getattr(args, 'config', None) else ContainerConfig()
    config.path = path
    for attr, value in (('size_blocks', args.size_blocks), ('ratio', args.ratio), ('branch', args.branch),
                        ('mode', args.mode), ('block_bytes', args.block_bytes), ('k', args.k)):
        if value is not None:
            setattr(config, attr, value)
    if config.seed is None:
        config.seed = args.seed
    return config


def _emit(text, summary, path):
    print(text.rstrip('\n'))
    if path:
        with open(path, 'w') as out:
            json.dump(summary, out, indent=2, default=str)


def _open(args):
    return open_container(args.container, load_key(args.key), durable=not args.lazy_state, seed=args.seed)


def cmd_create(args):
    config = config_from_args(args, args.container)
    handle = create(config, load_key(args.key, create=True), durable=not args.lazy_state)
    plan = handle.plan
    summary = {'path': args.container, 'mode': plan.mode, 'N': plan.N, 'M': plan.M, 'block_bytes': plan.block_size,
               'b': plan.b, 'N_p': plan.N_p, 'M_p': plan.M_p, 'h': plan.h, 'blocks': plan.total_blocks}
    handle.close()
    _emit('created ' + ' '.join('{}={}'.format(k, v) for k, v in summary.items()), summary, args.summary)


def cmd_read(args):
    with _open(args) as handle:
        data = handle.read(args.address)
    if args.out:
        with open(args.out, 'wb') as out:
            out.write(data)
    else:
        print(data.hex())


def cmd_write(args):
    with _open(args) as handle:
        if args.data_file:
            with open(args.data_file, 'rb') as src:
                data = src.read()
        else:
            data = bytes([args.fill & 0xFF]) * handle.block_size
        handle.write(args.address, data)
        print('wrote address {} at i={}'.format(args.address, handle.i))


def cmd_fuzz(args):
    with _open(args) as handle:
        result = benchmod.fuzz(handle, args.ops, seed=args.seed, reopen_every=args.reopen_every)
    _emit(result.to_text(), result.summary(), args.summary)
    return 0 if result.passed else 1


def cmd_bench(args):
    with _open(args) as handle:
        if args.trace:
            handle.start_trace()
        result = benchmod.bench(handle, args.workload, args.ops, seed=args.seed)
        if args.trace:
            trace = handle.stop_trace()
            write_trace(trace, args.trace)
            if args.plot:
                plot_write_pattern(trace, save_fig=args.plot)
    if args.csv:
        frame = result.to_frame()
        frame.to_csv(args.csv, mode='a', index=False, header=not os.path.exists(args.csv))
        if args.ratios_plot:
            plot_bench_ratios(pd.read_csv(args.csv), save_fig=args.ratios_plot)
    _emit(result.to_text(), result.summary(), args.summary)


def cmd_trace(args):
    trace = read_trace(args.trace_file)
    writes = filter_writes(trace)
    summary = {'events': len(trace), 'reads': trace.count(READ), 'writes': len(writes), 'meta': trace.meta}
    if args.writes_only:
        write_trace(writes, args.writes_only)
    if args.plot:
        plot_write_pattern(trace, save_fig=args.plot)
    _emit('trace events={events} reads={reads} writes={writes}'.format(**summary), summary, args.summary)


def _generated_traces(args, key):
    config = config_from_args(args)
    traces = []
    for n in range(args.sequences):
        config.seed = args.seed + n
        addresses = benchmod.random_addresses(config.N, args.writes, args.seed + n)
        if args.check == 'read':
            traces.append(benchmod.read_sequence_trace(config, key, addresses, args.writes, seed=args.seed + n))
        else:
            traces.append(benchmod.write_sequence_trace(config, key, addresses, seed=args.seed + n))
    return config, traces


def cmd_verify(args):
    key = load_key(args.key) if args.key or os.environ.get(KEY_ENV) else CipherKey.generate()

    if args.check == 'snapshot':
        config = config_from_args(args)
        series = []
        for n in range(max(args.sequences, 2)):
            config.seed = args.seed + n
            addresses = benchmod.random_addresses(config.N, args.writes, args.seed + n)
            series.append(benchmod.snapshot_sequence(config, key, addresses, args.every, seed=args.seed + n))
        report = verifier.VerifierReport(config.mode)
        report.add(verifier.check_snapshot_freshness(series))
    else:
        if args.traces:
            traces = [read_trace(path) for path in args.traces]
            scheme = traces[0].meta.get('scheme', 'unknown')
        else:
            config, traces = _generated_traces(args, key)
            scheme = config.mode
        report = verifier.VerifierReport(scheme)
        if args.check == 'det':
            report.add(verifier.check_determinism(traces))
        for trace in traces if args.check != 'det' else []:
            if args.check == 'budget':
                report.add(verifier.check_write_budget(trace, trace.meta['logical_writes'], args.bound))
            elif args.check == 'read':
                reads = trace.meta.get('logical_reads') or 0
                if reads <= 0:
                    raise ValueError("trace: Expecting logical reads in the trace metadata, got none")
                report.add(verifier.check_read_budget(trace, reads, N=trace.meta['geometry']['N'],
                                                      b=trace.meta['geometry'].get('b') or 64))
            else:
                start = trace.meta.get('payload_start', 1)
                offset = args.offset if args.offset is not None else start
                length = args.length if args.length is not None else max(trace.indices(WRITE).max() + 1 - offset, 1)
                report.add(verifier.check_uniformity(trace, offset, length))

    if args.report:
        report.write(args.report)
    _emit(report.to_text(), report.summary(), args.summary)
    return 0 if report.passed else 1


def cmd_attack(args):
    report = run_attack(N=args.n, k=args.k, trials=args.trials, seed=args.seed, n_jobs=args.jobs)
    summary = report.summary()
    text = report.to_text()
    if args.free_choice:
        rate = free_choice_rate(args.n, args.k, args.free_choice, args.seed)
        summary['free_choice_rate'] = rate
        text += '\nfree choice rate = {:.4f}'.format(rate)
    _emit(text, summary, args.summary)


def cmd_feasibility(args):
    boundary = feasibility_boundary(args.branch, args.block_bits)
    summary = {'b': args.branch, 'block_bits': args.block_bits, 'max_N': boundary}
    _emit('feasibility b={} block_bits={} max_N={}'.format(args.branch, args.block_bits,
                                                            '{:.4g}'.format(boundary) if boundary else None),
          summary, args.summary)


COMMANDS = {'create': cmd_create, 'read': cmd_read, 'write': cmd_write, 'fuzz': cmd_fuzz, 'bench': cmd_bench,
            'trace': cmd_trace, 'verify': cmd_verify, 'attack': cmd_attack, 'feasibility': cmd_feasibility}


def main(argv=None):
    args = build_parser().parse_args(argv)
    matplotlib.use('Agg')
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format='%(asctime)s %(levelname)s %(message)s')
    try:
        return COMMANDS[args.command](args) or 0
    except (WoramError, ValueError, OSError) as e:
        logging.error(e)
        print('error: {}'.format(e), file=sys.stderr)
        return 2


if __name__ == '__main__':
    sys.exit(main())
