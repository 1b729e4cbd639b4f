import json
import os
from datetime import datetime
from loguru import logger

def _jsonable(value):
    # numpy scalars and arrays expose tolist()
    if hasattr(value, 'tolist'):
        return value.tolist()
    if hasattr(value, 'model_dump'):
        return value.model_dump()
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")

def load_json_data(filepath):
    """Read a run spec, cached alignment or result file.

    Returns:
        Parsed JSON data, or None (after logging) when the file is missing
        or malformed; callers decide whether that is an error
    """
    if not os.path.exists(filepath):
        logger.warning(f"File not found: {filepath}")
        return None
    try:
        with open(filepath, 'r', encoding='utf-8') as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        logger.error(f"Invalid JSON in {filepath} (line {e.lineno}): {e.msg}")
        return None
    except OSError as e:
        logger.error(f"Error loading JSON file {filepath}: {str(e)}")
        return None

def save_json_data(data, filepath):
    """Write a JSON document, creating parent directories.

    numpy values and pydantic models are converted on the way out.

    Returns:
        True on success, False when the file could not be written
    """
    try:
        directory = os.path.dirname(filepath)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(filepath, 'w', encoding='utf-8') as f:
            json.dump(data, f, ensure_ascii=False, indent=2, default=_jsonable)
        return True
    except (OSError, TypeError) as e:
        logger.error(f"Could not save {filepath}: {str(e)}")
        return False

def append_jsonl(record, filepath, timestamp=True):
    """Append one structured record to a JSON Lines file.

    Args:
        record: Dictionary to write
        filepath: Target .jsonl file (directory created on demand)
        timestamp: Add a "timestamp" field when the record has none
    """
    directory = os.path.dirname(filepath)
    if directory:
        os.makedirs(directory, exist_ok=True)
    entry = dict(record)
    if timestamp and "timestamp" not in entry:
        entry["timestamp"] = datetime.now().strftime('%Y-%m-%d %H:%M:%S')
    with open(filepath, 'a', encoding='utf-8') as f:
        f.write(json.dumps(entry, ensure_ascii=False, default=_jsonable) + '\n')

def read_jsonl(filepath):
    """Read every record of a JSON Lines file, skipping malformed lines."""
    records = []
    if not os.path.exists(filepath):
        logger.warning(f"File not found: {filepath}")
        return records
    with open(filepath, 'r', encoding='utf-8') as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError:
                logger.warning(f"Skipping malformed line {line_no} in {filepath}")
    return records

def write_jsonl(records, filepath):
    """Write records to a fresh JSON Lines file and return the path."""
    directory = os.path.dirname(filepath)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(filepath, 'w', encoding='utf-8') as f:
        for record in records:
            f.write(json.dumps(record, ensure_ascii=False, default=_jsonable) + '\n')
    return filepath

def log_path(name, log_dir='logs'):
    """Dated JSON Lines log file under log_dir/json, e.g. train_2024-05-01.jsonl"""
    date_str = datetime.now().strftime('%Y-%m-%d')
    return os.path.join(log_dir, 'json', f"{name}_{date_str}.jsonl")

def summarize_log(filepath, key):
    """Count, mean, min and max of a numeric field across a JSON Lines log.

    Args:
        filepath: Log to analyze
        key: Numeric field to summarize (e.g. "loss")

    Returns:
        Dictionary with analysis results
    """
    try:
        values = [r[key] for r in read_jsonl(filepath) if isinstance(r.get(key), (int, float))]
        if not values:
            return {"error": f"No '{key}' values in {filepath}"}
        return {
            "count": len(values),
            "mean": sum(values) / len(values),
            "min": min(values),
            "max": max(values),
            "first": values[0],
            "last": values[-1],
        }
    except Exception as e:
        logger.error(f"Error analyzing log {filepath}: {str(e)}")
        return {"error": f"Error analyzing log: {str(e)}"}
