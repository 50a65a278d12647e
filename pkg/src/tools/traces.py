"""Agent trace corpus MCP tools."""
from typing import Any, Dict

from ..config import mcp
from ..trace_io import load_session, scan_corpus


@mcp.tool()
def scan_trace_corpus(root: str) -> Dict[str, Any]:
    """
    Index an agent trace corpus laid out as
    <dataset>/<experiment>/<stage>/{events,summaries,codes}.

    Returns:
    --------
    Dict[str, Any]
        - datasets: dataset directory names
        - experiments: number of experiment directories
        - stages: per stage directory, counts of event files, summaries and code files
        - totals: the same counts summed over the corpus
    """
    index = scan_corpus(root)
    totals = index.totals
    return {
        "datasets": list(index.datasets),
        "experiments": len(index.experiments),
        "stages": {
            key: {"events": c.events, "summaries": c.summaries, "codes": c.codes}
            for key, c in index.stages.items()
        },
        "totals": {"events": totals.events, "summaries": totals.summaries, "codes": totals.codes},
    }


@mcp.tool()
def session_event_histogram(path: str, lenient: bool = False) -> Dict[str, Any]:
    """
    Count the events of one session file by event type.

    Parameters:
    -----------
    path : str
        An events/openhands_events_<ts>.jsonl file.
    lenient : bool
        Skip unparseable lines instead of failing on the first one.
    """
    session = load_session(path, tolerance=1.0 if lenient else 0.0)
    return {
        "path": str(session.path),
        "events": len(session.events),
        "skipped_lines": len(session.failures),
        "histogram": session.histogram(),
        "summary": str(session.summary_path) if session.summary_path else None,
    }
