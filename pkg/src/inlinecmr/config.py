"""Chain configuration documents.

INI-style UTF-8 text::

    [chain]
    reader = icsp
    writer = icsp
    gadgets = kspace_buffer, trigger, prepare_ref, fft_recon

    [gadget.trigger]
    trigger_dimension = slice

Gadget order in the parsed config equals document order. Unknown sections
and unknown [chain] keys are errors, never silently ignored.
"""

from __future__ import annotations

from dataclasses import dataclass, field


class ConfigError(Exception):
    pass


@dataclass
class GadgetConfig:
    name: str
    properties: dict = field(default_factory=dict)


@dataclass
class ChainConfig:
    reader_name: str
    writer_name: str
    gadgets: list

    def gadget_names(self):
        return [g.name for g in self.gadgets]


def parse_chain_config(text):
    """Parse a chain document; raises ConfigError with a line number."""
    chain_keys = {}
    gadget_props = {}
    section = None
    seen_chain = False

    for lineno, raw in enumerate(text.split("\n"), start=1):
        line = raw.strip()
        if not line or line.startswith("#") or line.startswith(";"):
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section == "chain":
                seen_chain = True
            elif section.startswith("gadget."):
                gname = section[len("gadget."):]
                if not gname:
                    raise ConfigError(f"line {lineno}: empty gadget name")
                gadget_props.setdefault(gname, {})
            else:
                raise ConfigError(f"line {lineno}: unknown section [{section}]")
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key = key.strip()
        value = value.strip()
        if section is None:
            raise ConfigError(f"line {lineno}: content before any section")
        if section == "chain":
            if key not in ("reader", "writer", "gadgets"):
                raise ConfigError(f"line {lineno}: unknown chain key {key!r}")
            chain_keys[key] = value
        else:
            gadget_props[section[len("gadget."):]][key] = value

    if not seen_chain:
        raise ConfigError("missing [chain] section")
    for required in ("reader", "writer", "gadgets"):
        if required not in chain_keys:
            raise ConfigError(f"[chain] section is missing key {required!r}")

    names = [n.strip() for n in chain_keys["gadgets"].split(",") if n.strip()]
    if not names:
        raise ConfigError("gadget list is empty")

    unknown = set(gadget_props) - set(names)
    if unknown:
        raise ConfigError(
            "gadget section(s) for names not in the chain: "
            + ", ".join(sorted(unknown)))

    gadgets = [GadgetConfig(n, dict(gadget_props.get(n, {}))) for n in names]
    return ChainConfig(chain_keys["reader"], chain_keys["writer"], gadgets)


def render_chain_config(reader, writer, gadgets):
    """Build a chain document from (name, properties) pairs; inverse of parse."""
    lines = ["[chain]", f"reader = {reader}", f"writer = {writer}",
             "gadgets = " + ", ".join(name for name, _ in gadgets)]
    for name, props in gadgets:
        if not props:
            continue
        lines.append("")
        lines.append(f"[gadget.{name}]")
        for key, value in props.items():
            lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
