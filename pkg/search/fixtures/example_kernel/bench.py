#!/usr/bin/env python3
"""
Benchmark harness for the row-softmax task.

    bench.py <workspace> <task_file>

Builds kernel.cu and main.cpp with nvcc, then runs the driver once per
workload as `./bench <batch> <repetitions>`. The driver prints either
`ok <us> <us> ...` (one latency per repetition) or `wrong <message>`.
One JSON report goes to stdout.
"""

import json
import os
import subprocess
import sys
from pathlib import Path

NVCC = os.environ.get('NVCC', 'nvcc')


def report(workloads, global_log):
    print(json.dumps({'workloads': workloads, 'global_log': global_log}))


def main(argv):
    workspace, task_file = Path(argv[1]), Path(argv[2])
    task = json.loads(task_file.read_text(encoding='utf-8'))
    repetitions = os.environ.get('HYPOTREE_REPETITIONS', '1')
    ids = [w['workload_id'] for w in task['workloads']]

    build = subprocess.run(
        [NVCC, '-O3', '-o', 'bench', 'kernel.cu', 'main.cpp'],
        cwd=workspace, capture_output=True, text=True,
    )
    if build.returncode != 0:
        log = build.stderr[-2048:]
        report([{'workload_id': w, 'status': 'compile-error', 'log_excerpt': log} for w in ids], log)
        return 0

    results = []
    for workload in task['workloads']:
        batch = str(workload['parameters']['batch'])
        try:
            run = subprocess.run([str(workspace / 'bench'), batch, repetitions],
                                 cwd=workspace, capture_output=True, text=True, timeout=120)
        except subprocess.TimeoutExpired:
            results.append({'workload_id': workload['workload_id'], 'status': 'timeout', 'log_excerpt': ''})
            continue
        words = run.stdout.split()
        if run.returncode != 0:
            results.append({'workload_id': workload['workload_id'], 'status': 'runtime-error',
                            'log_excerpt': run.stderr[-1024:]})
        elif words[:1] == ['ok'] and len(words) > 1:
            results.append({'workload_id': workload['workload_id'], 'status': 'pass',
                            'latencies_us': [float(w) for w in words[1:]], 'log_excerpt': ''})
        else:
            results.append({'workload_id': workload['workload_id'], 'status': 'wrong-answer',
                            'log_excerpt': run.stdout[-1024:]})
    report(results, build.stderr[-1024:])
    return 0


if __name__ == '__main__':
    sys.exit(main(sys.argv))
