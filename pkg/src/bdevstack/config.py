"""Stack configuration: a YAML description of the device graph and its exports.

Example::

    reactor:
      poll_budget: 64
      idle_yield: true
      channel_depth: 128
    devices:
      - {id: n0, kind: null, block_size: 4096, block_count: 1048576}
      - {id: n1, kind: null, block_size: 4096, block_count: 1048576}
      - {id: r0, kind: raid, level: raid1, bases: [n0, n1]}
    exports:
      - {listen: "127.0.0.1:9000", mode: processed, device: r0}

Devices must be declared after their bases. Unknown keys are rejected, with
the offending line number in the error.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Optional

import yaml

from .blockcore import DeviceKind, DeviceSpec, Registry, StackError, ValidationError
from .engine import Reactor
from .export import BlockTarget, TargetMode, parse_endpoint
from .raid import PoisonConfig, RaidLevel

log = logging.getLogger(__name__)

_COMMON = {"id", "kind"}
_KIND_KEYS = {
    DeviceKind.NULL: {"block_size", "block_count"},
    DeviceKind.MEMORY: {"block_size", "block_count"},
    DeviceKind.FILE: {"block_size", "block_count", "path", "sparse"},
    DeviceKind.RAID: {"bases", "level", "strip_size_blocks", "safe_read", "poison"},
    DeviceKind.COMPRESS: {"bases", "block_size", "block_count", "max_job_bytes", "level",
                          "map_path"},
    DeviceKind.REMOTE: {"endpoint", "timeout"},
}
_REQUIRED = {
    DeviceKind.NULL: {"block_size", "block_count"},
    DeviceKind.MEMORY: {"block_size", "block_count"},
    DeviceKind.FILE: {"block_size", "block_count", "path"},
    DeviceKind.RAID: {"bases", "level"},
    DeviceKind.COMPRESS: {"bases"},
    DeviceKind.REMOTE: {"endpoint"},
}
_POISON_KEYS = {"enabled", "probability", "seed"}
_EXPORT_KEYS = {"listen", "mode", "device", "upstream", "depth"}
_REACTOR_KEYS = {"poll_budget", "idle_yield", "channel_depth"}
_TOP_KEYS = {"reactor", "devices", "exports"}


class ConfigError(ValidationError):
    def __init__(self, message: str, line: Optional[int] = None, where: str = ""):
        prefix = []
        if line is not None:
            prefix.append(f"line {line}")
        if where:
            prefix.append(where)
        super().__init__(": ".join(prefix + [message]))
        self.line = line
        self.where = where


class StartupError(StackError):
    pass


@dataclass
class ReactorSettings:
    poll_budget: int = 64
    idle_yield: bool = False
    channel_depth: int = 128


@dataclass
class DeviceDecl:
    id: str
    kind: DeviceKind
    params: dict = field(default_factory=dict)
    line: Optional[int] = field(default=None, compare=False)

    @property
    def bases(self) -> list:
        return list(self.params.get("bases", []))

    def to_device_spec(self) -> DeviceSpec:
        p = dict(self.params)
        return DeviceSpec(self.id, self.kind, p.pop("block_size", None), p.pop("block_count", None),
                          p.pop("bases", []), p)


@dataclass
class ExportDecl:
    listen: str
    mode: TargetMode
    device: Optional[str] = None
    upstream: Optional[str] = None
    depth: Optional[int] = None
    line: Optional[int] = field(default=None, compare=False)


@dataclass
class StackSpec:
    devices: list = field(default_factory=list)
    exports: list = field(default_factory=list)
    reactor: ReactorSettings = field(default_factory=ReactorSettings)

    def device(self, device_id: str) -> DeviceDecl:
        for d in self.devices:
            if d.id == device_id:
                return d
        raise KeyError(device_id)


# -- parsing ------------------------------------------------------------------

class _Doc:
    """Helpers over a composed YAML node tree that keep line numbers around."""

    def __init__(self, text: str):
        self.loader = yaml.SafeLoader(text)
        try:
            self.root = self.loader.get_single_node()
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            raise ConfigError(f"invalid YAML: {getattr(exc, 'problem', exc)}",
                              mark.line + 1 if mark else None) from None

    def value(self, node):
        return self.loader.construct_object(node, deep=True)

    @staticmethod
    def line(node) -> int:
        return node.start_mark.line + 1

    def mapping(self, node, where: str, allowed: set) -> dict:
        """Return {key: (value_node, line)} after rejecting unknown or repeated keys."""
        if not isinstance(node, yaml.MappingNode):
            raise ConfigError("expected a mapping", self.line(node), where)
        out = {}
        for k, v in node.value:
            key = self.value(k)
            if key not in allowed:
                raise ConfigError(f"unknown field {key!r} (allowed: {', '.join(sorted(allowed))})",
                                  self.line(k), where)
            if key in out:
                raise ConfigError(f"duplicate field {key!r}", self.line(k), where)
            out[key] = (v, self.line(k))
        return out

    def sequence(self, node, where: str) -> list:
        if not isinstance(node, yaml.SequenceNode):
            raise ConfigError("expected a list", self.line(node), where)
        return node.value


def _typed(value, kind, line, where, minimum=None):
    if kind is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif kind is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    else:
        ok = isinstance(value, kind)
    if not ok:
        raise ConfigError(f"expected {kind.__name__}, got {value!r}", line, where)
    if minimum is not None and value < minimum:
        raise ConfigError(f"must be >= {minimum}, got {value}", line, where)
    return value


def _parse_kind(raw, line, where) -> DeviceKind:
    if raw is None:  # YAML reads a bare `null` as None
        return DeviceKind.NULL
    try:
        return DeviceKind(str(raw).lower())
    except ValueError:
        raise ConfigError(f"unknown device kind {raw!r}", line, where) from None


def _parse_device(doc: _Doc, node, index: int) -> DeviceDecl:
    where = f"devices[{index}]"
    fields = doc.mapping(node, where, _COMMON | set().union(*_KIND_KEYS.values()))
    if "id" not in fields or "kind" not in fields:
        raise ConfigError("device needs 'id' and 'kind'", doc.line(node), where)
    dev_id = doc.value(fields["id"][0])
    if not isinstance(dev_id, str) or not dev_id:
        raise ConfigError("id must be a non-empty string", fields["id"][1], where)
    where = f"devices[{index}] ({dev_id})"
    kind = _parse_kind(doc.value(fields["kind"][0]), fields["kind"][1], where)
    allowed = _KIND_KEYS[kind]
    for key, (_, line) in fields.items():
        if key not in allowed and key not in _COMMON:
            raise ConfigError(f"field {key!r} is not valid for kind {kind.value!r}", line, where)
    missing = _REQUIRED[kind] - fields.keys()
    if missing:
        raise ConfigError(f"missing field(s) {', '.join(sorted(missing))}", doc.line(node), where)

    params = {}
    for key, (vnode, line) in fields.items():
        if key in _COMMON:
            continue
        f = f"{where}.{key}"
        if key == "poison":
            params[key] = _parse_poison(doc, vnode, f)
            continue
        value = doc.value(vnode)
        if key in ("block_size", "block_count", "strip_size_blocks", "max_job_bytes"):
            value = _typed(value, int, line, f, minimum=1)
        elif key == "level" and kind is DeviceKind.RAID:
            try:
                value = RaidLevel.parse(value).value
            except ValidationError as exc:
                raise ConfigError(str(exc), line, f) from None
        elif key == "level":
            value = _typed(value, int, line, f, minimum=0)
        elif key in ("sparse", "safe_read"):
            value = _typed(value, bool, line, f)
        elif key == "timeout":
            value = _typed(value, float, line, f)
        elif key in ("path", "map_path", "endpoint"):
            value = _typed(value, str, line, f)
        elif key == "bases":
            if isinstance(value, str):
                value = [value]
            if not isinstance(value, list) or not all(isinstance(b, str) for b in value) or not value:
                raise ConfigError("bases must be a non-empty list of device ids", line, f)
        params[key] = value
    if kind is DeviceKind.COMPRESS and len(params["bases"]) != 1:
        raise ConfigError("compress takes exactly one base", fields["bases"][1], where)
    return DeviceDecl(dev_id, kind, params, doc.line(node))


def _parse_poison(doc: _Doc, node, where: str) -> PoisonConfig:
    fields = doc.mapping(node, where, _POISON_KEYS)
    enabled = _typed(doc.value(fields["enabled"][0]), bool, fields["enabled"][1], where) \
        if "enabled" in fields else False
    prob = 0.001
    if "probability" in fields:
        prob = _typed(doc.value(fields["probability"][0]), float, fields["probability"][1], where)
        if not 0.0 <= prob <= 1.0:
            raise ConfigError("probability must be within [0, 1]", fields["probability"][1], where)
    seed = _typed(doc.value(fields["seed"][0]), int, fields["seed"][1], where) \
        if "seed" in fields else 0
    return PoisonConfig(enabled=enabled, probability=prob, rng_seed=seed)


def _parse_export(doc: _Doc, node, index: int) -> ExportDecl:
    where = f"exports[{index}]"
    fields = doc.mapping(node, where, _EXPORT_KEYS)
    if "listen" not in fields or "mode" not in fields:
        raise ConfigError("export needs 'listen' and 'mode'", doc.line(node), where)
    listen = str(doc.value(fields["listen"][0]))
    try:
        parse_endpoint(listen)
    except ValidationError as exc:
        raise ConfigError(str(exc), fields["listen"][1], where) from None
    try:
        mode = TargetMode(str(doc.value(fields["mode"][0])).lower())
    except ValueError:
        raise ConfigError("mode must be 'processed' or 'passthrough'", fields["mode"][1], where) from None
    decl = ExportDecl(listen, mode, line=doc.line(node))
    if mode is TargetMode.PROCESSED:
        if "device" not in fields or "upstream" in fields:
            raise ConfigError("processed export needs 'device' and no 'upstream'",
                              doc.line(node), where)
        decl.device = _typed(doc.value(fields["device"][0]), str, fields["device"][1], where)
    else:
        if "upstream" not in fields or "device" in fields:
            raise ConfigError("passthrough export needs 'upstream' and no 'device'",
                              doc.line(node), where)
        decl.upstream = str(doc.value(fields["upstream"][0]))
        try:
            parse_endpoint(decl.upstream)
        except ValidationError as exc:
            raise ConfigError(str(exc), fields["upstream"][1], where) from None
    if "depth" in fields:
        decl.depth = _typed(doc.value(fields["depth"][0]), int, fields["depth"][1], where, minimum=1)
    return decl


def _check_graph(devices: list) -> None:
    ids = {}
    for d in devices:
        if d.id in ids:
            raise ConfigError(f"duplicate device id {d.id!r}", d.line)
        ids[d.id] = d
    for d in devices:
        for b in d.bases:
            if b not in ids:
                raise ConfigError(f"unknown base device {b!r}", d.line, d.id)

    state = {}

    def visit(d, path):
        state[d.id] = 1
        for b in d.bases:
            if state.get(b) == 1:
                cycle = path[path.index(b):] + [b] if b in path else [d.id, b]
                raise ConfigError(f"cycle in device bases: {' -> '.join(cycle)}", d.line, d.id)
            if state.get(b) is None:
                visit(ids[b], path + [b])
        state[d.id] = 2

    for d in devices:
        if d.id not in state:
            visit(d, [d.id])
    seen = set()
    for d in devices:
        for b in d.bases:
            if b not in seen:
                raise ConfigError(f"base {b!r} must be declared before {d.id!r}", d.line, d.id)
        seen.add(d.id)


def parse_config(text: str) -> StackSpec:
    doc = _Doc(text)
    spec = StackSpec()
    if doc.root is None:
        return spec
    top = doc.mapping(doc.root, "config", _TOP_KEYS)
    if "reactor" in top:
        r = doc.mapping(top["reactor"][0], "reactor", _REACTOR_KEYS)
        settings = ReactorSettings()
        if "poll_budget" in r:
            settings.poll_budget = _typed(doc.value(r["poll_budget"][0]), int, r["poll_budget"][1],
                                          "reactor.poll_budget", 1)
        if "idle_yield" in r:
            settings.idle_yield = _typed(doc.value(r["idle_yield"][0]), bool, r["idle_yield"][1],
                                         "reactor.idle_yield")
        if "channel_depth" in r:
            settings.channel_depth = _typed(doc.value(r["channel_depth"][0]), int,
                                            r["channel_depth"][1], "reactor.channel_depth", 1)
        spec.reactor = settings
    if "devices" in top and top["devices"][0].value not in (None, "", "null"):
        for i, node in enumerate(doc.sequence(top["devices"][0], "devices")):
            spec.devices.append(_parse_device(doc, node, i))
    _check_graph(spec.devices)
    if "exports" in top and top["exports"][0].value not in (None, "", "null"):
        ids = {d.id for d in spec.devices}
        for i, node in enumerate(doc.sequence(top["exports"][0], "exports")):
            e = _parse_export(doc, node, i)
            if e.device is not None and e.device not in ids:
                raise ConfigError(f"export references unknown device {e.device!r}", e.line,
                                  f"exports[{i}]")
            spec.exports.append(e)
    return spec


def load_config(path) -> StackSpec:
    with open(path) as f:
        return parse_config(f.read())


def _device_doc(d: DeviceDecl) -> dict:
    out = {"id": d.id, "kind": d.kind.value}
    for key, value in d.params.items():
        if isinstance(value, PoisonConfig):
            value = {"enabled": value.enabled, "probability": value.probability,
                     "seed": value.rng_seed}
        out[key] = copy.deepcopy(value)
    return out


def serialize_config(spec: StackSpec) -> str:
    doc = {
        "reactor": {"poll_budget": spec.reactor.poll_budget,
                    "idle_yield": spec.reactor.idle_yield,
                    "channel_depth": spec.reactor.channel_depth},
        "devices": [_device_doc(d) for d in spec.devices],
        "exports": [],
    }
    for e in spec.exports:
        item = {"listen": e.listen, "mode": e.mode.value}
        if e.device is not None:
            item["device"] = e.device
        if e.upstream is not None:
            item["upstream"] = e.upstream
        if e.depth is not None:
            item["depth"] = e.depth
        doc["exports"].append(item)
    return yaml.safe_dump(doc, sort_keys=False)


# -- assembly -------------------------------------------------------------------

class Stack:
    """A running stack: devices, one reactor and the exported targets."""

    def __init__(self, spec: StackSpec, registry: Registry, reactor: Reactor):
        self.spec = spec
        self.registry = registry
        self.reactor = reactor
        self.targets: list[BlockTarget] = []

    def endpoint(self, index: int = 0) -> str:
        return self.targets[index].endpoint

    def shutdown(self) -> None:
        for t in reversed(self.targets):
            t.stop()
        self.targets.clear()
        self.reactor.stop()
        self.registry.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.shutdown()


def build_stack(spec: StackSpec) -> Stack:
    """Register devices bottom-up, start the reactor, then start exports.

    Startup is all-or-nothing: on any failure everything already opened or
    bound is torn down before ``StartupError`` is raised.
    """
    settings = spec.reactor
    reactor = Reactor(poll_budget=settings.poll_budget, idle_yield=settings.idle_yield,
                      name="stack-reactor")
    registry = Registry(reactor)
    stack = Stack(spec, registry, reactor)
    try:
        for d in spec.devices:
            try:
                registry.register_device(d.to_device_spec())
            except ValidationError as exc:
                raise ConfigError(str(exc), d.line, d.id) from exc
            except (StackError, OSError) as exc:
                raise StartupError(f"device {d.id!r}: {exc}") from exc
        listens = {}
        for e in spec.exports:
            host, port = parse_endpoint(e.listen)
            if port != 0 and (host, port) in listens:
                raise StartupError(f"duplicate export endpoint {e.listen}")
            listens[(host, port)] = e
        reactor.start()
        for i, e in enumerate(spec.exports):
            device = registry.get(e.device) if e.device else None
            target = BlockTarget(e.listen, e.mode, device=device, reactor=reactor,
                                 upstream=e.upstream, depth=e.depth or settings.channel_depth,
                                 name=f"export{i}-{e.mode.value}")
            try:
                target.start()
            except OSError as exc:
                raise StartupError(f"export {e.listen}: {exc}") from exc
            stack.targets.append(target)
    except BaseException:
        stack.shutdown()
        raise
    return stack
