"""Cross claim extraction: (question, choice) text to a claim graph through a completion client."""

from __future__ import annotations

import hashlib
import logging
import os
import re
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Protocol, Union

import requests

from .kg_store import STOP_MARKER, ClaimGraph, Triplet, build_claim_graph, parse_triplet_block

logger = logging.getLogger(__name__)

NO_CLAIMS_WARNING = "no_claims"
TOKEN_ENV_VAR = "GRAF_CLIENT_TOKEN"
MODEL_ENV_VAR = "GRAF_CLIENT_MODEL"

TEXT_SLOT = "{text}"

_ENGLISH_TEMPLATE = """\
Extract all entities and relationships between entities from the legal text based on the example. In the end, add STOP.
You will answer with triplets of the form: (entity;relation;entity). The triplets are separated on lines. Each triplet relationship will be entered separately.
Entities can be institutions, organizations, persons, functions, documents, courts and others.

Text:
(1) An assets investigation commission, hereinafter referred to as the investigation commission, shall operate in addition to each court of appeal, consisting of:
a) 2 judges from the court of appeal, designated by its president, one of whom shall act as president,
b) a prosecutor from the prosecutor's office operating under the court of appeal, designated by the chief prosecutor of this prosecutor's office.
(2) The president and members of the investigation commission shall be designated for a period of 3 years. During the same period and by the same persons, 3 alternates will also be appointed, who will replace the holders in the event that they, for legal reasons, are unable to participate in the work of the investigation commission.
(3) The investigation commission has a secretary, appointed by the president of the court of appeal from among the clerks of this court.

Entity;Relationship;Entity:
(court of appeal;shall operated in addition to;assets investigation commission)
(assets investigation commission;referred to as;investigation commission)
(investigation commission;consisting of;2 judges)
(2 judges;designated by;president of the court of appeal)
(investigation commission;consisting of;prosecutor)
(prosecutor;from;prosecutor's office operating under the court of appeal)
(prosecutor;designated by;chief prosecutor)
(president of the investigation commission;designated for a period of;3 years)
(members of the investigation commission;designated for a period of;3 years)
(3 alternates;appointed by;the president of the court of appeal)
(3 alternates;appointed by;the chief prosecutor)
(3 alternates;designated for a period of;3 years)
(3 alternates;will replace the holders if they cannot take part in the work of the investigation commission on;the heads)
(investigation commission;has;a secretary)
(a secretary;appointed by among the clerks of;the president of the court of appeal)
STOP

Text:
{text}

Entity;Relationship;Entity:"""

_ROMANIAN_TEMPLATE = """\
Extrage toate entitățile și toate relațiile dintre entități din textul legal pe baza exemplului. La final adaugă STOP.
Tu vei răspunde cu triplete de forma: (entitate;relație;entitate). Tripletele sunt separate pe linii. Fiecare relație triplet se va trece separat.
Entitățile pot fi instituții, organizații, persoane, funcții, documente, instanțe și altele.

Text:
(1) Pe lângă fiecare curte de apel va funcţiona o comisie de cercetare a averilor, denumită în continuare comisie de cercetare, formată din:
a) 2 judecători de la curtea de apel, desemnaţi de preşedintele acesteia, dintre care unul în calitate de preşedinte,
b) un procuror de la parchetul care funcţionează pe lângă curtea de apel, desemnat de prim-procurorul acestui parchet.
(2) Preşedintele şi membrii comisiei de cercetare sunt desemnaţi pe o perioadă de 3 ani. Pe aceeaşi perioadă şi de către aceleaşi persoane vor fi desemnaţi şi 3 supleanţi, care îi vor înlocui pe titulari în cazul în care aceştia, din motive legale, nu vor putea lua parte la lucrările comisiei de cercetare.
(3) Comisia de cercetare are un secretar, desemnat de preşedintele curţii de apel dintre grefierii acestei instanţe.

Entitate;Relație;Entitate:
(curte de apel;funcționează pe lângă;comisie de cercetare a averilor)
(comisie de cercetare a averilor;denumită;comisie de cercetare)
(comisie de cercetare;formată din;2 judecători)
(2 judecători;desemnați de;președinte curte de apel)
(comisie de cercetare;formată din;procuror)
(procuror;de la;parchetul care funcționează pe lângă curtea de apel)
(procuror;desemnat de;prim-procuror)
(președinte comisie de cercetare;desemnat pe o perioadă de;3 ani)
(membrii comisiei de cercetare;desemnat pe o perioadă de;3 ani)
(3 supleanți;desemnați de;președinte curte de apel)
(3 supleanți;desemnați de;prim-procuror)
(3 supleanți;desemnați pe o perioadă de;3 ani)
(3 supleanți;îi vor înlocui dacă nu vor putea lua parte la lucrările comisiei de cercetare pe;titulari)
(comisie de cercetare;are;un secretar)
(un secretar;desemnat dintre grefieri de;președinte curte de apel)
STOP

Text:
{text}

Entitate;Relație;Entitate:"""

PROMPT_TEMPLATES: Dict[str, str] = {"en": _ENGLISH_TEMPLATE, "ro": _ROMANIAN_TEMPLATE}

_embedded_triplet = re.compile(r"\(\s*([^;()\n]+?)\s*;\s*([^;()\n]+?)\s*;\s*([^;()\n]+?)\s*\)")


class ClientError(RuntimeError):
    """A completion client could not produce a completion."""

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None) -> None:
        super().__init__(message)
        self.diagnostics: Dict[str, Any] = dict(diagnostics or {})

    def __str__(self) -> str:
        base = super().__str__()
        if not self.diagnostics:
            return base
        details = ", ".join(f"{key}={value}" for key, value in sorted(self.diagnostics.items()))
        return f"{base} ({details})"


class CompletionClient(Protocol):
    def complete(self, prompt: str) -> str: ...


# ---------------------------------------------------------------------------
# Prompts
# ---------------------------------------------------------------------------


def render_prompt(document: str, language: str = "en") -> str:
    """Few-shot extraction prompt with ``document`` in the final Text slot."""
    try:
        template = PROMPT_TEMPLATES[language]
    except KeyError:
        raise ValueError(f"unknown prompt language {language!r}; expected one of {sorted(PROMPT_TEMPLATES)}") from None
    return template.replace(TEXT_SLOT, document)


def prompt_document(prompt: str) -> str:
    """Recover the document of a rendered prompt (the whole prompt if no template matches)."""
    for template in PROMPT_TEMPLATES.values():
        prefix, _, suffix = template.partition(TEXT_SLOT)
        if prompt.startswith(prefix) and prompt.endswith(suffix) and len(prompt) >= len(prefix) + len(suffix):
            return prompt[len(prefix):len(prompt) - len(suffix)]
    return prompt


def find_embedded_triplets(text: str) -> List[Triplet]:
    return [Triplet(*(group.strip() for group in match.groups())) for match in _embedded_triplet.finditer(text)]


# ---------------------------------------------------------------------------
# Clients
# ---------------------------------------------------------------------------


class StubCompletionClient:
    """Answers with the ``(h;r;t)`` patterns already written into the document."""

    def complete(self, prompt: str) -> str:
        triplets = find_embedded_triplets(prompt_document(prompt))
        return "\n".join([triplet.render() for triplet in triplets] + [STOP_MARKER])


class FixtureCompletionClient:
    """Serves canned completions from ``<sha256(prompt)>.txt`` files."""

    def __init__(self, directory: Union[str, Path]) -> None:
        self.directory = Path(directory)
        if not self.directory.is_dir():
            raise ClientError("fixture directory does not exist", {"directory": str(self.directory)})

    @staticmethod
    def fixture_name(prompt: str) -> str:
        return hashlib.sha256(prompt.encode("utf-8")).hexdigest() + ".txt"

    def complete(self, prompt: str) -> str:
        path = self.directory / self.fixture_name(prompt)
        try:
            return path.read_text(encoding="utf-8")
        except OSError as error:
            raise ClientError("no canned completion for prompt", {"fixture": str(path), "reason": str(error)}) from error


class HttpCompletionClient:
    """POSTs ``{"prompt", "model"}`` as JSON to a text-completion endpoint."""

    def __init__(
        self,
        url: str,
        model: str = "",
        token: Optional[str] = None,
        timeout: float = 60.0,
        max_tokens: int = 512,
    ) -> None:
        self.url = url
        self.model = model or os.environ.get(MODEL_ENV_VAR, "")
        self.token = token if token is not None else os.environ.get(TOKEN_ENV_VAR)
        self.timeout = timeout
        self.max_tokens = max_tokens

    def _headers(self) -> Dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        return headers

    @staticmethod
    def _completion_text(payload: Any) -> Optional[str]:
        if not isinstance(payload, dict):
            return None
        choices = payload.get("choices")
        if isinstance(choices, list) and choices and isinstance(choices[0], dict):
            text = choices[0].get("text")
            if isinstance(text, str):
                return text
        for key in ("completion", "response"):
            if isinstance(payload.get(key), str):
                return payload[key]
        return None

    def complete(self, prompt: str) -> str:
        body: Dict[str, Any] = {"prompt": prompt, "max_tokens": self.max_tokens, "stop": [STOP_MARKER]}
        if self.model:
            body["model"] = self.model
        try:
            response = requests.post(self.url, headers=self._headers(), json=body, timeout=self.timeout)
            response.raise_for_status()
            payload = response.json()
        except requests.HTTPError as error:
            status = error.response.status_code if error.response is not None else None
            raise ClientError("completion request failed", {"url": self.url, "status": status}) from error
        except requests.RequestException as error:
            raise ClientError("completion request failed", {"url": self.url, "reason": str(error)}) from error
        except ValueError as error:
            raise ClientError("completion response is not JSON", {"url": self.url}) from error

        text = self._completion_text(payload)
        if text is None:
            keys = sorted(payload) if isinstance(payload, dict) else type(payload).__name__
            raise ClientError("completion response has no text field", {"url": self.url, "keys": keys})
        return text


def make_client(spec: str, *, model: str = "", token: Optional[str] = None, timeout: float = 60.0) -> CompletionClient:
    """Build a client from ``stub``, ``fixture:DIR`` or ``http:URL``."""
    kind, _, argument = spec.partition(":")
    if kind == "stub" and not argument:
        return StubCompletionClient()
    if kind == "fixture" and argument:
        return FixtureCompletionClient(argument)
    if kind == "http" and argument:
        # ``http:https://host/v1/completions`` and ``http://host/...`` are both accepted.
        url = argument if argument.startswith(("http://", "https://")) else spec
        return HttpCompletionClient(url, model=model, token=token, timeout=timeout)
    if kind == "https" and argument:
        return HttpCompletionClient(spec, model=model, token=token, timeout=timeout)
    raise ValueError(f"unknown client {spec!r}; expected stub, fixture:DIR or http:URL")


# ---------------------------------------------------------------------------
# Extraction
# ---------------------------------------------------------------------------


def extract_claims(
    question: str,
    choice: str,
    client: CompletionClient,
    *,
    language: str = "en",
    retries: int = 1,
) -> ClaimGraph:
    """Render the prompt over ``question + " " + choice`` and parse the completion."""
    prompt = render_prompt(f"{question} {choice}", language)
    for attempt in range(retries + 1):
        parsed = parse_triplet_block(client.complete(prompt))
        if parsed.triplets:
            return build_claim_graph(parsed.triplets)
        logger.debug("Extraction attempt %d returned no triplets (%d skipped lines)", attempt + 1, parsed.skipped)

    logger.warning("No claims extracted for choice %r", choice[:60])
    return build_claim_graph((), warnings=(NO_CLAIMS_WARNING,))


def stub_extract(text: str) -> ClaimGraph:
    """Claim graph from the ``(h;r;t)`` patterns embedded in ``text``."""
    return build_claim_graph(find_embedded_triplets(text))


def extract_corpus(
    documents: Iterable[str],
    client: CompletionClient,
    *,
    language: str = "en",
) -> List[str]:
    """One parsed triplet block (``STOP``-terminated) per document."""
    blocks: List[str] = []
    skipped_total = 0
    for number, document in enumerate(documents, start=1):
        parsed = parse_triplet_block(client.complete(render_prompt(document, language)))
        skipped_total += parsed.skipped
        if not parsed.triplets:
            logger.warning("Document %d produced no triplets", number)
        blocks.append("\n".join([triplet.render() for triplet in parsed.triplets] + [STOP_MARKER]))
    if skipped_total:
        logger.warning("Skipped %d unparseable completion line(s) across %d documents", skipped_total, len(blocks))
    logger.info("Extracted triplets from %d documents", len(blocks))
    return blocks


class ClientExtractor:
    """Callable ``(question, choice) -> ClaimGraph`` bound to one client."""

    def __init__(self, client: CompletionClient, language: str = "en", retries: int = 1) -> None:
        self.client = client
        self.language = language
        self.retries = retries

    def __call__(self, question: str, choice: str) -> ClaimGraph:
        return extract_claims(question, choice, self.client, language=self.language, retries=self.retries)


__all__ = [
    "ClientError",
    "ClientExtractor",
    "CompletionClient",
    "FixtureCompletionClient",
    "HttpCompletionClient",
    "NO_CLAIMS_WARNING",
    "PROMPT_TEMPLATES",
    "StubCompletionClient",
    "extract_claims",
    "extract_corpus",
    "find_embedded_triplets",
    "make_client",
    "prompt_document",
    "render_prompt",
    "stub_extract",
]
