from typing import List, Dict, Any, Optional, Sequence
import math

# ===== Formatting Utilities =====

def format_ms(ms: float) -> str:
    """Format a duration in milliseconds the way result tables print delays.

    Args:
        ms: Duration in milliseconds (inf for full context)

    Returns:
        Formatted string such as "767msec"
    """
    if ms is None:
        return "-"
    if math.isinf(ms):
        return "full"
    return f"{int(round(ms))}msec"

def format_seconds(ms: float) -> str:
    """Format a lookahead in seconds, e.g. 2400 -> "2.4 sec"."""
    if math.isinf(ms):
        return "full"
    return f"{ms / 1000.0:g} sec"

def format_rate(value: float) -> str:
    """Three significant digits without trailing zeros (0.3, 0.02, 1.25)."""
    if value is None:
        return "-"
    return f"{value:.3g}"

def format_percent(value: float) -> str:
    return f"{100.0 * value:.1f}"

def _table(headers: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    widths = [len(h) for h in headers]
    for row in rows:
        widths = [max(w, len(cell)) for w, cell in zip(widths, row)]
    lines = [" | ".join(h.ljust(w) for h, w in zip(headers, widths))]
    lines.append("-+-".join("-" * w for w in widths))
    for row in rows:
        lines.append(" | ".join(cell.ljust(w) for cell, w in zip(row, widths)))
    return "\n".join(lines)

# ===== Report Templates =====

def format_results_table(rows: List[Dict[str, Any]]) -> str:
    """Format evaluation results as a model x lookahead table.

    Args:
        rows: Dictionaries with model, config, lookahead_ms, wer and an
            optional delay_ms

    Returns:
        Plain-text table
    """
    if not rows:
        return "No results."
    try:
        cells = [
            [
                str(row['model']),
                str(row['config']),
                format_seconds(row['lookahead_ms']),
                format_percent(row['wer']),
                format_ms(row.get('delay_ms')),
            ]
            for row in rows
        ]
    except KeyError as e:
        return f"Error: result row is missing {str(e)}"
    return _table(["Model", "Config", "Lookahead", "WER (%)", "Alignment Delay"], cells)

def format_bench_grid(rows: List[Any]) -> str:
    """Format encode benchmark rows as a mode x step-size grid of wall seconds.

    Args:
        rows: BenchRow objects (or dicts with mode, step_size, wall_seconds)

    Returns:
        Plain-text grid, one line per mode
    """
    if not rows:
        return "No benchmark rows."
    records = [row if isinstance(row, dict) else row.model_dump() for row in rows]
    steps = sorted({r['step_size'] for r in records if r['mode'] != 'training'})
    modes = []
    for record in records:
        if record['mode'] not in modes:
            modes.append(record['mode'])

    cells = []
    for mode in modes:
        timings = {r['step_size']: r['wall_seconds'] for r in records if r['mode'] == mode}
        if mode == 'training':
            value = f"{next(iter(timings.values())):.3f}"
            cells.append([mode] + [value] * len(steps) if steps else [mode, value])
        else:
            cells.append([mode] + [f"{timings[s]:.3f}" if s in timings else "-" for s in steps])
    headers = ["Mode"] + ([f"step {s}" for s in steps] if steps else ["wall (s)"])
    return _table(headers, cells)

def format_decode_bench(rows: List[Any]) -> str:
    """Format decode benchmark rows (label encoder x cache) with RTF."""
    if not rows:
        return "No benchmark rows."
    records = [row if isinstance(row, dict) else row.model_dump() for row in rows]
    cells = [
        [
            r['label_encoder'],
            str(r['beam']),
            "on" if r['cache'] else "off",
            format_rate(r['rtf']),
            str(r['label_encoder_calls']),
            str(r.get('cache_hits', 0)),
        ]
        for r in records
    ]
    return _table(["Label encoder", "Beam", "Cache", "RTF", "Encoder calls", "Cache hits"], cells)

def format_delay_report(report: Any) -> str:
    """One-line summary of a DelayReport."""
    record = report if isinstance(report, dict) else report.model_dump()
    summary = f"Alignment delay {format_ms(record['mean_ms'])} over {record['words']} words"
    if record.get('unpaired_words'):
        summary += f" ({record['unpaired_words']} unpaired)"
    return summary

# ===== Streaming Templates =====

def format_event(event: Any) -> str:
    """Format a streaming event, e.g. "[  390ms] low partial: abc"."""
    record = event if isinstance(event, dict) else event.model_dump()
    text = record['text'] if record['text'] else "<empty>"
    return f"[{int(round(record['stream_time_ms'])):>6}ms] {record['branch']} {record['type']}: {text}"

def format_transcript(utt_id: str, text: str, reference: Optional[str] = None) -> str:
    line = f"{utt_id}\t{text}"
    if reference is not None:
        line += f"\t(ref: {reference})"
    return line
