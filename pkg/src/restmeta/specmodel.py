"""Normalized operation model for OpenAPI 3.x and Swagger 2.0 documents.

Both dialects are folded into the same :class:`ApiSpecification`, keyed by
``(http_method, path_template)``. Only the subset of the document needed to
enumerate operations, bind parameters and look up documented responses is
interpreted.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .errors import AmbiguousMatch, SchemaViolation, UnparseableDocument, UnsupportedVersion

log = logging.getLogger(__name__)

HTTP_METHODS = ("GET", "POST", "PUT", "PATCH", "DELETE", "HEAD", "OPTIONS")
VALUE_KINDS = ("string", "number", "integer", "boolean", "array", "object")
LOCATIONS = ("path", "query", "header", "body-field", "form-field")

_PLACEHOLDER = re.compile(r"\{([^{}/]+)\}")
_STATUS_KEY = re.compile(r"^[1-5][0-9]{2}$")


@dataclass(frozen=True)
class ParameterDef:
    name: str
    location: str
    required: bool = False
    value_kind: str = "string"


@dataclass(frozen=True)
class ResponseDef:
    """Documented response: body schema (resolved, may be None) and declared headers."""

    schema: Any = None
    headers: Mapping[str, Any] = field(default_factory=dict)

    def header_format(self, name: str) -> str | None:
        for key, schema in self.headers.items():
            if key.lower() == name.lower() and isinstance(schema, Mapping):
                return schema.get("format")
        return None


@dataclass(frozen=True)
class Operation:
    http_method: str
    path_template: str
    operation_id: str | None = None
    parameters: tuple[ParameterDef, ...] = ()
    request_body_schema: Any = None
    documented_responses: Mapping[str, ResponseDef] = field(default_factory=dict)

    @property
    def key(self) -> tuple[str, str]:
        return (self.http_method, self.path_template)

    @property
    def declares_form_data(self) -> bool:
        return any(p.location == "form-field" for p in self.parameters)

    def documents_status(self, status: int) -> bool:
        return str(status) in self.documented_responses or "default" in self.documented_responses

    def response_for(self, status: int) -> ResponseDef | None:
        return self.documented_responses.get(str(status), self.documented_responses.get("default"))

    def __str__(self) -> str:
        return f"{self.http_method} {self.path_template}"


@dataclass(frozen=True)
class ApiSpecification:
    title: str
    version: str
    operations: tuple[Operation, ...]
    raw_text: str = field(default="", repr=False)
    base_url: str | None = None
    dialect: str = "openapi3"

    def __len__(self) -> int:
        return len(self.operations)

    def get(self, method: str, path_template: str) -> Operation | None:
        key = (method.upper(), path_template)
        for op in self.operations:
            if op.key == key:
                return op
        return None

    def with_base_url(self, base_url: str) -> "ApiSpecification":
        return ApiSpecification(self.title, self.version, self.operations, self.raw_text, base_url, self.dialect)


# -- loading -----------------------------------------------------------------


def _load_document(text: str) -> Any:
    try:
        return json.loads(text)
    except ValueError:
        pass
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise UnparseableDocument(f"document is neither JSON nor YAML: {exc}") from exc


def _detect_dialect(doc: Mapping[str, Any]) -> str:
    if str(doc.get("swagger", "")).strip() == "2.0":
        return "swagger2"
    openapi = str(doc.get("openapi", "")).strip()
    if openapi.startswith("3."):
        return "openapi3"
    raise UnsupportedVersion(
        f"expected swagger: '2.0' or openapi: '3.x', got swagger={doc.get('swagger')!r} openapi={doc.get('openapi')!r}"
    )


class _Resolver:
    """Same-document ``$ref`` resolution; remote references are not followed."""

    def __init__(self, doc: Mapping[str, Any]):
        self.doc = doc

    def lookup(self, ref: str) -> Any:
        if not ref.startswith("#/"):
            log.warning("ignoring non-local $ref %s", ref)
            return {}
        node: Any = self.doc
        for part in ref[2:].split("/"):
            part = part.replace("~1", "/").replace("~0", "~")
            if not isinstance(node, Mapping) or part not in node:
                raise SchemaViolation(f"unresolvable $ref {ref}")
            node = node[part]
        return node

    def deref(self, node: Any, _seen: frozenset = frozenset()) -> Any:
        while isinstance(node, Mapping) and "$ref" in node:
            ref = node["$ref"]
            if ref in _seen:
                return {}
            _seen = _seen | {ref}
            node = self.lookup(ref)
        return node

    def resolve(self, node: Any, _seen: frozenset = frozenset()) -> Any:
        """Fully inline references, leaving cycles as empty objects."""
        if isinstance(node, Mapping):
            if "$ref" in node:
                ref = node["$ref"]
                if ref in _seen:
                    return {}
                return self.resolve(self.lookup(ref), _seen | {ref})
            return {k: self.resolve(v, _seen) for k, v in node.items() if not str(k).startswith("x-")}
        if isinstance(node, list):
            return [self.resolve(v, _seen) for v in node]
        return node


def _value_kind(schema: Any) -> str:
    if not isinstance(schema, Mapping):
        return "string"
    kind = schema.get("type")
    if isinstance(kind, list):
        kind = next((k for k in kind if k != "null"), None)
    if kind in VALUE_KINDS:
        return kind
    if "properties" in schema or "allOf" in schema:
        return "object"
    if "items" in schema:
        return "array"
    return "string"


def _body_fields(schema: Any, location: str) -> list[ParameterDef]:
    if not isinstance(schema, Mapping) or not isinstance(schema.get("properties"), Mapping):
        return []
    required = set(schema.get("required") or ())
    return [
        ParameterDef(name, location, name in required, _value_kind(sub))
        for name, sub in schema["properties"].items()
    ]


def _server_url(doc: Mapping[str, Any], dialect: str) -> str | None:
    """Absolute service root named by the document, if any.

    Swagger's basePath is already part of every template, so only
    scheme and host are used there.
    """
    if dialect == "swagger2":
        host = doc.get("host")
        if not host:
            return None
        schemes = doc.get("schemes") or ["https"]
        scheme = "https" if "https" in schemes else str(schemes[0])
        return f"{scheme}://{host}".rstrip("/")
    for server in doc.get("servers") or ():
        url = str((server or {}).get("url", ""))
        if url.startswith(("http://", "https://")) and "{" not in url:
            return url.rstrip("/")
    return None


def _join_base_path(base_path: str, path: str) -> str:
    base = (base_path or "").rstrip("/")
    if base and not base.startswith("/"):
        base = "/" + base
    return base + path


def _parse_parameters(raw_params, resolver: _Resolver, dialect: str):
    params: list[ParameterDef] = []
    body_schema = None
    for raw in raw_params:
        p = resolver.deref(raw)
        if not isinstance(p, Mapping) or "name" not in p or "in" not in p:
            raise SchemaViolation(f"malformed parameter {raw!r}")
        where = p["in"]
        if where == "body":
            body_schema = resolver.resolve(p.get("schema", {}))
            params.extend(_body_fields(body_schema, "body-field"))
            continue
        if where == "formData":
            location = "form-field"
        elif where in ("path", "query", "header"):
            location = where
        else:
            # cookie parameters carry no operation semantics for this engine
            continue
        schema = p.get("schema", p) if dialect == "openapi3" else p
        schema = resolver.deref(schema)
        required = True if location == "path" else bool(p.get("required", False))
        params.append(ParameterDef(str(p["name"]), location, required, _value_kind(schema)))
    return params, body_schema


def _merge_parameters(shared: list[ParameterDef], own: list[ParameterDef]) -> list[ParameterDef]:
    merged = {(p.name, p.location): p for p in shared}
    for p in own:
        merged[(p.name, p.location)] = p
    return list(merged.values())


def _parse_request_body(raw, resolver: _Resolver):
    body = resolver.deref(raw)
    if not isinstance(body, Mapping):
        return None, []
    content = body.get("content") or {}
    for media, entry in content.items():
        schema = resolver.resolve((entry or {}).get("schema", {}))
        if media in ("application/x-www-form-urlencoded", "multipart/form-data"):
            return None, _body_fields(schema, "form-field")
    for media, entry in content.items():
        if "json" in media or media == "*/*":
            schema = resolver.resolve((entry or {}).get("schema", {}))
            return schema, _body_fields(schema, "body-field")
    if content:
        entry = next(iter(content.values())) or {}
        return resolver.resolve(entry.get("schema", {})), []
    return None, []


def _parse_responses(raw, resolver: _Resolver, dialect: str) -> dict[str, ResponseDef]:
    responses: dict[str, ResponseDef] = {}
    if not isinstance(raw, Mapping):
        return responses
    for code, resp in raw.items():
        key = str(code)
        if key.startswith("x-"):
            continue
        if key != "default" and not _STATUS_KEY.match(key):
            log.warning("ignoring response key %r (not a status code)", key)
            continue
        resp = resolver.deref(resp) or {}
        if dialect == "swagger2":
            schema = resolver.resolve(resp.get("schema")) if "schema" in resp else None
        else:
            schema = None
            for entry in (resp.get("content") or {}).values():
                schema = resolver.resolve((entry or {}).get("schema"))
                break
        headers = {}
        for name, header in (resp.get("headers") or {}).items():
            header = resolver.deref(header) or {}
            headers[str(name)] = resolver.resolve(header.get("schema", header) if dialect == "openapi3" else header)
        responses[key] = ResponseDef(schema, headers)
    return responses


def parse_spec(document_text: str, format_hint: str = "auto") -> ApiSpecification:
    """Parse an OpenAPI 3.x or Swagger 2.0 document (JSON or YAML text)."""
    doc = _load_document(document_text)
    if not isinstance(doc, Mapping):
        raise UnparseableDocument("document root is not a mapping")
    dialect = _detect_dialect(doc)
    if format_hint not in ("auto", None) and format_hint != dialect:
        raise UnsupportedVersion(f"document is {dialect}, but {format_hint} was requested")

    paths = doc.get("paths")
    if not isinstance(paths, Mapping):
        raise SchemaViolation("document has no paths object")

    resolver = _Resolver(doc)
    base_path = doc.get("basePath", "") if dialect == "swagger2" else ""
    operations: dict[tuple[str, str], Operation] = {}
    for raw_path, item in paths.items():
        raw_path = str(raw_path)
        if raw_path.startswith("x-"):
            continue
        if not raw_path.startswith("/"):
            raise SchemaViolation(f"path {raw_path!r} does not begin with '/'")
        item = resolver.deref(item)
        if not isinstance(item, Mapping):
            raise SchemaViolation(f"path item for {raw_path} is not a mapping")
        template = _join_base_path(base_path, raw_path)
        shared, shared_body = _parse_parameters(item.get("parameters") or (), resolver, dialect)
        for method, raw_op in item.items():
            verb = str(method).upper()
            if verb not in HTTP_METHODS:
                continue
            if not isinstance(raw_op, Mapping):
                raise SchemaViolation(f"{verb} {raw_path} is not a mapping")
            own, body_schema = _parse_parameters(raw_op.get("parameters") or (), resolver, dialect)
            params = _merge_parameters(shared, own)
            body_schema = body_schema if body_schema is not None else shared_body
            if dialect == "openapi3" and "requestBody" in raw_op:
                body_schema, fields = _parse_request_body(raw_op["requestBody"], resolver)
                params = _merge_parameters(params, fields)
            declared = {p.name for p in params if p.location == "path"}
            for name in _PLACEHOLDER.findall(template):
                if name not in declared:
                    log.warning("%s %s: path parameter %s is not declared; assuming string", verb, template, name)
                    params.append(ParameterDef(name, "path", True, "string"))
            operations[(verb, template)] = Operation(
                http_method=verb,
                path_template=template,
                operation_id=raw_op.get("operationId"),
                parameters=tuple(params),
                request_body_schema=body_schema,
                documented_responses=_parse_responses(raw_op.get("responses"), resolver, dialect),
            )

    info = doc.get("info") or {}
    ordered = tuple(sorted(operations.values(), key=lambda o: (o.path_template, o.http_method)))
    return ApiSpecification(
        title=str(info.get("title", "")),
        version=str(info.get("version", "")),
        operations=ordered,
        raw_text=document_text,
        base_url=_server_url(doc, dialect),
        dialect=dialect,
    )


def load_spec(path: str | Path, format_hint: str = "auto") -> ApiSpecification:
    """Read a spec file; ``"-"`` reads standard input. The extension is ignored."""
    if str(path) == "-":
        import sys

        return parse_spec(sys.stdin.read(), format_hint)
    return parse_spec(Path(path).read_text(encoding="utf-8"), format_hint)


def bundled_spec_path(name: str) -> Path:
    """Path of a document shipped with the package (``petstore`` or ``usermanagement``)."""
    data = Path(__file__).parent / "data"
    for candidate in sorted(data.iterdir()):
        if candidate.stem == name and candidate.suffix in (".yaml", ".yml", ".json"):
            return candidate
    raise FileNotFoundError(name)


# -- lookup ------------------------------------------------------------------


def list_operations(spec: ApiSpecification) -> list[Operation]:
    return sorted(spec.operations, key=lambda o: (o.path_template, o.http_method))


def _segment_pattern(segment: str) -> re.Pattern | None:
    if not _PLACEHOLDER.search(segment):
        return None
    parts = _PLACEHOLDER.split(segment)
    # split alternates literal, name, literal, ...
    regex = "".join(re.escape(p) if i % 2 == 0 else "[^/]+" for i, p in enumerate(parts))
    return re.compile(f"^{regex}$")


def _match_score(template: str, segments: list[str]) -> tuple[int, ...] | None:
    tsegs = template.strip("/").split("/") if template.strip("/") else []
    if len(tsegs) != len(segments):
        return None
    score = []
    for tseg, seg in zip(tsegs, segments):
        pattern = _segment_pattern(tseg)
        if pattern is None:
            if tseg != seg:
                return None
            score.append(1)
        else:
            if not seg or not pattern.match(seg):
                return None
            score.append(0)
    return tuple(score)


def split_concrete_path(concrete_path: str) -> list[str]:
    path = concrete_path.split("?", 1)[0].split("#", 1)[0]
    path = path.strip("/")
    return path.split("/") if path else []


def resolve_operation(spec: ApiSpecification, method: str, concrete_path: str) -> Operation | None:
    """Map a concrete request path back to its documented operation.

    Literal segments beat placeholder segments, compared left to right; an
    exact tie between different templates raises :class:`AmbiguousMatch`.
    """
    verb = method.upper()
    segments = split_concrete_path(concrete_path)
    scored = []
    for op in spec.operations:
        if op.http_method != verb:
            continue
        score = _match_score(op.path_template, segments)
        if score is not None:
            scored.append((score, op))
    if not scored:
        return None
    best = max(score for score, _ in scored)
    winners = [op for score, op in scored if score == best]
    if len(winners) > 1:
        raise AmbiguousMatch(verb, concrete_path, winners)
    return winners[0]


def instantiate(path_template: str, value: str = "1") -> str:
    return _PLACEHOLDER.sub(value, path_template)


def placeholders(path_template: str) -> list[str]:
    return _PLACEHOLDER.findall(path_template)
