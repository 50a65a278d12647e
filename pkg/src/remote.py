"""
Adapters for diagnostic and summarization services reachable over HTTP.

Both adapters return plain domain objects and leave validation to the caller:
a report or audit that violates the portfolio rules goes through the same
retry loop as the reference generator's output.
"""
import logging
from typing import Any, Dict, Optional, Sequence, Tuple

import httpx

from .client import client as default_client
from .config import DIAGNOSTIC_ENDPOINT, SUMMARIZER_ENDPOINT
from .ddf import CompletenessAudit, DiagnosticContext, DiagnosticReport, RuleBasedGenerator
from .errors import GenerationFailure
from .lrm import ExtractiveSummarizer
from .models import ImplementationDescriptor
from .pipeline import Generators
from .policies.diagnostic_policy import DIAGNOSTIC_POLICY_TEXT
from .utils.helpers import truncate

logger = logging.getLogger(__name__)


def _post(http: httpx.Client, url: str, payload: Dict[str, Any]) -> Dict[str, Any]:
    try:
        resp = http.post(url, json=payload)
    except httpx.HTTPError as e:
        raise GenerationFailure(f"request to {url} failed: {e}") from e

    if resp.status_code >= 400:
        try:
            detail = resp.json()
        except ValueError:
            detail = resp.text
        raise GenerationFailure(f"service error {resp.status_code} from {url}: {detail}")

    data = resp.json()
    if not isinstance(data, dict):
        raise ValueError("service reply must be a JSON object")
    return data


class RemoteDiagnosticGenerator:
    """Posts the diagnostic context plus the policy text; parses the JSON reply."""

    def __init__(self, endpoint: str, http: Optional[httpx.Client] = None, policy: str = DIAGNOSTIC_POLICY_TEXT):
        self.endpoint = endpoint.rstrip("/")
        self.http = http or default_client
        self.policy = policy

    def report(self, ctx: DiagnosticContext) -> DiagnosticReport:
        data = _post(self.http, f"{self.endpoint}/report", {
            "mode": "failure",
            "policy": self.policy,
            "context": ctx.to_dict(),
        })
        return DiagnosticReport.from_dict(data)

    def audit(self, modules: Sequence[str], implementation: ImplementationDescriptor) -> CompletenessAudit:
        data = _post(self.http, f"{self.endpoint}/audit", {
            "mode": "optimization",
            "policy": self.policy,
            "modules": list(modules),
            "implementation": implementation.to_dict(),
        })
        return CompletenessAudit.from_dict(data)


class RemoteSummarizer:
    """Summarization service; replies longer than `bound` are truncated."""

    def __init__(self, endpoint: str, bound: int = 400, http: Optional[httpx.Client] = None):
        self.endpoint = endpoint.rstrip("/")
        self.bound = bound
        self.http = http or default_client

    def summarize(self, fields: Sequence[Tuple[str, str]]) -> str:
        data = _post(self.http, f"{self.endpoint}/summarize", {
            "fields": [[label, value] for label, value in fields],
            "bound": self.bound,
        })
        return truncate(str(data.get("summary", "")), self.bound)


def build_generators(
    diagnostic_endpoint: Optional[str] = DIAGNOSTIC_ENDPOINT,
    summarizer_endpoint: Optional[str] = SUMMARIZER_ENDPOINT,
    summary_cap: int = 400,
) -> Generators:
    """Remote generators where an endpoint is configured, reference generators otherwise."""
    diagnostic = RemoteDiagnosticGenerator(diagnostic_endpoint) if diagnostic_endpoint else RuleBasedGenerator()
    if summarizer_endpoint:
        summarizer = RemoteSummarizer(summarizer_endpoint, bound=summary_cap)
    else:
        summarizer = ExtractiveSummarizer(bound=summary_cap)
    logger.debug(
        "generators diagnostic=%s summarizer=%s", type(diagnostic).__name__, type(summarizer).__name__
    )
    return Generators(diagnostic=diagnostic, summarizer=summarizer)
