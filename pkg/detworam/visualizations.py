'''
This module contains all functions relating to visualization of traces and
benchmark results.

'''

import matplotlib.pyplot as plt
import pandas as pd
import seaborn as sns

from .device import WRITE


def plot_write_pattern(trace=None, max_events=2000, fig_size=(10, 4), save_fig=None):
    '''
    Plots the physical index of every WRITE against its position in the trace.
    Sequential layouts show up as a sawtooth.

    Parameters:
    ------------
        trace: Trace

        max_events: int, Default 2000

            Only the first max_events writes are drawn.

        fig_size: tuple, Default (10, 4)

        save_fig: str, Default None

            File name to save the figure to.

    Returns:
    ---------
        matplotlib Figure
    '''
    if trace is None:
        raise ValueError("trace: Expecting a Trace, got 'None'")

    frame = trace.to_frame()
    frame = frame[frame['kind'] == WRITE].head(max_events).reset_index(drop=True)
    frame['write'] = frame.index

    fig = plt.figure(figsize=fig_size)
    ax = fig.gca()
    sns.scatterplot(x='write', y='index', data=frame, s=6, linewidth=0, ax=ax)
    ax.set_xlabel('write number')
    ax.set_ylabel('physical block')
    ax.set_title('Write pattern ({})'.format(trace.meta.get('scheme', 'unknown')))

    if save_fig:
        fig.savefig(save_fig)
    return fig


def plot_bench_ratios(results=None, fig_size=(6, 4), save_fig=None):
    '''
    Bar plot of physical writes per logical write, one bar per (scheme, workload).

    Parameters:
    ------------
        results: list of BenchResult or DataFrame

            DataFrames must carry scheme, workload and write_ratio columns.

        save_fig: str, Default None

    Returns:
    ---------
        matplotlib Figure
    '''
    if results is None:
        raise ValueError("results: Expecting a list of BenchResult or a DataFrame, got 'None'")

    if isinstance(results, pd.DataFrame):
        frame = results
    else:
        frame = pd.concat([r.to_frame() for r in results], ignore_index=True)
    frame = frame[frame['logical_writes'] > 0] if 'logical_writes' in frame else frame

    fig = plt.figure(figsize=fig_size)
    ax = fig.gca()
    sns.barplot(x='scheme', y='write_ratio', hue='workload', data=frame, ax=ax)
    ax.set_ylabel('physical writes per logical write')
    ax.set_title('Write amplification')

    if save_fig:
        fig.savefig(save_fig)
    return fig
