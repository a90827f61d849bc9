'''
This module contains the obliviousness checks run over recorded traces and
device snapshots. Checks only ever look at physical locations and ciphertext
bytes, which is all a write-only adversary gets to see.

'''

import json
import logging
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy import stats

from .device import READ, WRITE, filter_writes
from .errors import GeometryMismatch


@dataclass
class CheckResult:
    name: str
    passed: bool
    stats: dict = field(default_factory=dict)
    offence: str = None

    def to_line(self):
        values = ' '.join('{}={}'.format(k, _fmt(v)) for k, v in self.stats.items())
        line = 'check {}: {} {}'.format(self.name, 'PASS' if self.passed else 'FAIL', values).rstrip()
        if self.offence:
            line += ' first_offence="{}"'.format(self.offence)
        return line


def _fmt(value):
    if isinstance(value, float):
        return '{:.6g}'.format(value)
    if isinstance(value, Fraction):
        return str(float(value))
    return str(value)


@dataclass
class VerifierReport:
    '''
    Results of one verification run.

    Parameters:
    ------------
        scheme: str

        checks: list of CheckResult
    '''
    scheme: str
    checks: list = field(default_factory=list)

    @property
    def passed(self):
        return all(check.passed for check in self.checks)

    def add(self, check):
        self.checks.append(check)
        level = logging.INFO if check.passed else logging.WARNING
        logging.log(level, "%s %s", self.scheme, check.to_line())
        return check

    def to_text(self):
        lines = ['scheme {}'.format(self.scheme)]
        lines.extend(check.to_line() for check in self.checks)
        lines.append('result {}'.format('PASS' if self.passed else 'FAIL'))
        return '\n'.join(lines) + '\n'

    def summary(self):
        return {'scheme': self.scheme, 'passed': self.passed,
                'checks': [{'name': c.name, 'passed': c.passed, 'offence': c.offence,
                            'stats': {k: (float(v) if isinstance(v, Fraction) else v) for k, v in c.stats.items()}}
                           for c in self.checks]}

    def write(self, path, summary_path=None):
        with open(path, 'w') as out:
            out.write(self.to_text())
        if summary_path:
            with open(summary_path, 'w') as out:
                json.dump(self.summary(), out, indent=2, default=str)


def _payload_events(trace, kind):
    start = trace.meta.get('payload_start', 0)
    return [e for e in trace if e.kind == kind and e.index >= start]


def check_determinism(traces):
    '''
    Passes iff the WRITE locations of every trace equal those of the first.
    All traces must share geometry and logical write count.

    Parameters:
    ------------
        traces: list of Trace

    Returns:
    ---------
        CheckResult
    '''
    if not traces:
        raise ValueError("traces: Expecting at least one trace, got none")

    reference = traces[0].meta
    for n, trace in enumerate(traces[1:], start=1):
        for key in ('geometry', 'logical_writes'):
            if trace.meta.get(key) != reference.get(key):
                raise GeometryMismatch("traces[{}]: Expecting {}={}, got {}".format(
                    n, key, reference.get(key), trace.meta.get(key)))

    locations = [filter_writes(trace).indices() for trace in traces]
    base = locations[0]
    for n, other in enumerate(locations[1:], start=1):
        if np.array_equal(base, other):
            continue
        common = min(len(base), len(other))
        mismatch = np.flatnonzero(base[:common] != other[:common])
        position = int(mismatch[0]) if mismatch.size else common
        written = filter_writes(traces[n]).events
        offence = 'trace {} write #{}: {} (expected {})'.format(
            n, position, written[position] if position < len(written) else 'missing',
            int(base[position]) if position < len(base) else 'none')
        return CheckResult('det', False, {'traces': len(traces), 'writes': len(base)}, offence)

    return CheckResult('det', True, {'traces': len(traces), 'writes': len(base)})


def check_write_budget(trace, logical_write_count, bound):
    '''
    Average payload WRITEs per logical write against bound. Blocks below the
    trace's payload_start (the superblock) are not counted.

    Returns:
    ---------
        CheckResult with the measured average in stats['measured'].
    '''
    if logical_write_count <= 0:
        raise ValueError("logical_write_count: Expecting a positive count, got {}".format(logical_write_count))

    writes = _payload_events(trace, WRITE)
    bound = Fraction(bound).limit_denominator(10 ** 6)
    measured = Fraction(len(writes), logical_write_count)
    passed = measured <= bound
    offence = None
    if not passed:
        allowed = int(bound * logical_write_count)
        offence = str(writes[allowed]) if allowed < len(writes) else None
    return CheckResult('budget', passed, {'writes': len(writes), 'logical': logical_write_count,
                                          'measured': float(measured), 'bound': float(bound)}, offence)


def _ceil_log(x, b):
    t = 0
    while b ** t < x:
        t += 1
    return t


def check_read_budget(trace, logical_read_count, N=None, b=64, c=2, c0=2):
    '''
    Average payload READs per logical read. When N is given the check passes
    iff the average is at most c * ceil(log_b N) + c0.
    '''
    if logical_read_count <= 0:
        raise ValueError("logical_read_count: Expecting a positive count, got {}".format(logical_read_count))

    reads = _payload_events(trace, READ)
    measured = len(reads) / logical_read_count
    result = {'reads': len(reads), 'logical': logical_read_count, 'measured': measured}
    if N is None:
        return CheckResult('read', True, result)

    limit = c * _ceil_log(N, b) + c0
    result['limit'] = limit
    return CheckResult('read', measured <= limit, result)


def changed_blocks(before, after):
    '''Indices of device blocks whose bytes differ between two snapshots.'''
    if before.shape != after.shape:
        raise GeometryMismatch("snapshot: Expecting shape {}, got {}".format(before.shape, after.shape))
    return np.flatnonzero(np.any(before != after, axis=1))


def check_snapshot_freshness(series):
    '''
    Each element of series is the list of snapshots taken from one logical
    sequence at the same write counts. Passes iff every sequence changed the
    same set of blocks between every pair of consecutive snapshots.
    '''
    if not series:
        raise ValueError("series: Expecting at least one snapshot sequence, got none")
    if len({len(s) for s in series}) > 1:
        raise GeometryMismatch("series: Expecting equally many snapshots per sequence, got {}".format(
            [len(s) for s in series]))

    changes = [[changed_blocks(a, b) for a, b in zip(s, s[1:])] for s in series]
    for n, other in enumerate(changes[1:], start=1):
        for step, (mine, theirs) in enumerate(zip(changes[0], other)):
            if not np.array_equal(mine, theirs):
                diff = np.setxor1d(mine, theirs)
                offence = 'sequence {} interval {}: block {} changed in only one sequence'.format(n, step, int(diff[0]))
                return CheckResult('snapshot', False, {'sequences': len(series), 'intervals': len(changes[0])},
                                   offence)

    return CheckResult('snapshot', True, {'sequences': len(series), 'intervals': len(changes[0])})


def check_uniformity(trace, offset, length, alpha=0.001):
    '''
    Chi-square test of WRITE locations over [offset, offset+length) against the
    uniform distribution. Passes iff p > alpha.
    '''
    indices = np.array([e.index - offset for e in trace if e.kind == WRITE and offset <= e.index < offset + length])
    if indices.size == 0:
        raise ValueError("trace: Expecting writes inside [{}, {}), got none".format(offset, offset + length))
    counts = np.bincount(indices, minlength=length)
    result = stats.chisquare(counts)
    return CheckResult('uniform', bool(result.pvalue > alpha),
                       {'writes': int(indices.size), 'chi2': float(result.statistic), 'p': float(result.pvalue)})
