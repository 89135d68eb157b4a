"""
Training and Benchmark Performance Monitoring Module
====================================================

DESCRIPTION:
Structured JSON-lines logging for long-running stages (training epochs,
benchmark cells) plus the encoder forward-pass counter that backs the
registration call-count check.

FEATURES:
- One JSON object per line, appended under an exclusive file lock
- Summary file with totals, success rate and slowest records
- Thread-safe forward-pass counter with a scoped measurement helper

USAGE:
    from monitoring.performance_monitor import PerformanceMonitor

    monitor = PerformanceMonitor('performance_logs/train_performance.jsonl',
                                 'performance_logs/train_summary.json')
    monitor.log_record(stage='train', name='epoch_1', seconds=4.2, success=True,
                       metrics={'loss_total': 0.031})
    monitor.update_summary_file()
    monitor.print_summary()
"""

import fcntl
import json
import threading
from contextlib import contextmanager
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional


class ForwardPassCounter:
    """Counts encoder forward passes across threads."""

    def __init__(self):
        self._lock = threading.Lock()
        self._count = 0

    def increment(self, n: int = 1) -> None:
        with self._lock:
            self._count += n

    @property
    def count(self) -> int:
        with self._lock:
            return self._count

    def reset(self) -> None:
        with self._lock:
            self._count = 0

    @contextmanager
    def measure(self) -> Iterator[Dict[str, int]]:
        """Yields a dict whose 'passes' entry holds the passes made inside the block.

        Only meaningful when no other thread encodes at the same time.
        """
        box = {'passes': 0}
        start = self.count
        try:
            yield box
        finally:
            box['passes'] = self.count - start


class PerformanceMonitor:
    """JSONL performance log for training epochs and benchmark cells"""

    def __init__(self,
                 log_file: str = 'performance_logs/performance.jsonl',
                 summary_file: str = 'performance_logs/summary.json'):
        self.log_file = log_file
        self.summary_file = summary_file

        Path(self.log_file).parent.mkdir(parents=True, exist_ok=True)
        Path(self.summary_file).parent.mkdir(parents=True, exist_ok=True)

    def log_record(self,
                   stage: str,
                   name: str,
                   seconds: float,
                   success: bool,
                   metrics: Optional[Dict[str, Any]] = None,
                   error_message: Optional[str] = None,
                   parameters: Optional[Dict[str, Any]] = None) -> None:
        """
        Append one performance record.

        Args:
            stage: Pipeline stage ('train', 'bench', ...)
            name: Record label, e.g. 'epoch_3' or 'rotation/fmr/30'
            seconds: Wall-clock duration of the unit of work
            success: Whether the unit finished without error
            metrics: Numeric results (losses, errors, rates)
            error_message: Error text if the unit failed
            parameters: Settings the unit ran with
        """
        record = {
            'timestamp': datetime.now().isoformat(),
            'stage': stage,
            'name': name,
            'processing_time_seconds': round(float(seconds), 4),
            'success': bool(success),
            'error_message': error_message,
            'metrics': metrics or {},
            'parameters': parameters or {},
        }
        with open(self.log_file, 'a', encoding='utf-8') as f:
            fcntl.flock(f.fileno(), fcntl.LOCK_EX)
            try:
                f.write(json.dumps(record, default=float) + '\n')
                f.flush()
            finally:
                fcntl.flock(f.fileno(), fcntl.LOCK_UN)

    def get_performance_data(self) -> List[Dict[str, Any]]:
        try:
            with open(self.log_file, 'r', encoding='utf-8') as f:
                return [json.loads(line) for line in f if line.strip()]
        except FileNotFoundError:
            return []

    def calculate_summary(self) -> Dict[str, Any]:
        data = self.get_performance_data()
        if not data:
            return {
                'total_records': 0,
                'successful_records': 0,
                'failed_records': 0,
                'total_processing_time_seconds': 0.0,
                'avg_processing_time_seconds': 0.0,
                'slowest_record': None,
                'success_rate_percent': 0.0,
                'last_updated': datetime.now().isoformat(),
            }
        successful = [d for d in data if d['success']]
        total_time = sum(d['processing_time_seconds'] for d in data)
        slowest = max(data, key=lambda d: d['processing_time_seconds'])
        return {
            'total_records': len(data),
            'successful_records': len(successful),
            'failed_records': len(data) - len(successful),
            'total_processing_time_seconds': total_time,
            'avg_processing_time_seconds': total_time / len(data),
            'slowest_record': {'name': slowest['name'], 'seconds': slowest['processing_time_seconds']},
            'success_rate_percent': 100.0 * len(successful) / len(data),
            'stages': sorted({d['stage'] for d in data}),
            'last_updated': datetime.now().isoformat(),
        }

    def update_summary_file(self) -> None:
        summary = self.calculate_summary()
        with open(self.summary_file, 'w', encoding='utf-8') as f:
            fcntl.flock(f.fileno(), fcntl.LOCK_EX)
            try:
                json.dump(summary, f, indent=2)
                f.flush()
            finally:
                fcntl.flock(f.fileno(), fcntl.LOCK_UN)

    def print_summary(self) -> None:
        summary = self.calculate_summary()
        print(f"\n📊 PERFORMANCE SUMMARY:")
        print(f"   Records: {summary['successful_records']}/{summary['total_records']} "
              f"({summary['success_rate_percent']:.1f}% success)")
        print(f"   Total time: {summary['total_processing_time_seconds']:.1f}s")
        print(f"   Avg time/record: {summary['avg_processing_time_seconds']:.2f}s")
        if summary['failed_records'] > 0:
            print(f"   ⚠️  Failed records: {summary['failed_records']}")


def create_monitor(stage: str, log_dir: str = 'performance_logs') -> PerformanceMonitor:
    """Monitor writing <log_dir>/<stage>_performance.jsonl and <stage>_summary.json"""
    return PerformanceMonitor(log_file=str(Path(log_dir) / f'{stage}_performance.jsonl'),
                              summary_file=str(Path(log_dir) / f'{stage}_summary.json'))
