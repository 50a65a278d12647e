"""HTTP client shared by the remote generator adapters."""
import httpx
from .config import GENERATOR_API_KEY, REMOTE_TIMEOUT

headers = {"Authorization": f"Bearer {GENERATOR_API_KEY}"} if GENERATOR_API_KEY else {}
client = httpx.Client(headers=headers, timeout=REMOTE_TIMEOUT)
