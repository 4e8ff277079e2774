"""Run manifests: every produced file with its SHA-256, plus suite verdicts."""

from __future__ import annotations

import hashlib
import json
import os

from .errors import ManifestError

MANIFEST = "manifest.json"


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _clean(x):
    """JSON-safe copy (numpy scalars to Python, non-finite floats to strings)."""
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if hasattr(x, "item") and not isinstance(x, (str, bytes)):
        try:
            x = x.item()
        except (ValueError, AttributeError):
            x = x.tolist()
            return _clean(x)
    if isinstance(x, float) and x != x:
        return "nan"
    if isinstance(x, float) and x in (float("inf"), float("-inf")):
        return "inf" if x > 0 else "-inf"
    return x


class ManifestWriter:
    """Single writer for all outputs of one run.

    Files are written through :meth:`path` or :meth:`write_text` and listed
    with their hashes when :meth:`close` writes the manifest.
    """

    def __init__(self, out_dir, command, config=None):
        self.out_dir = os.path.abspath(out_dir)
        os.makedirs(self.out_dir, exist_ok=True)
        self.command = command
        self.config = dict(config or {})
        self.files = []
        self.suites = []

    def path(self, name):
        """Absolute path for an output file; the file is registered for hashing."""
        if name == MANIFEST or os.path.isabs(name) or ".." in name.split(os.sep):
            raise ManifestError(f"invalid output name {name!r}")
        if name not in self.files:
            self.files.append(name)
        return os.path.join(self.out_dir, name)

    def write_text(self, name, text):
        p = self.path(name)
        with open(p, "w", newline="") as fh:
            fh.write(text)
        return p

    def suite(self, name, passed, report=None, **headline):
        self.suites.append({"name": name, "passed": bool(passed), "report": report, "headline": _clean(headline)})

    @property
    def passed(self):
        return all(s["passed"] for s in self.suites)

    def failing(self):
        return [s for s in self.suites if not s["passed"]]

    def close(self):
        files = []
        for name in self.files:
            p = os.path.join(self.out_dir, name)
            if not os.path.exists(p):
                raise ManifestError(f"declared output {name!r} was never written")
            files.append({"path": name, "sha256": sha256_file(p), "bytes": os.path.getsize(p)})
        doc = {"command": self.command, "config": _clean(self.config), "files": files,
               "suites": self.suites, "passed": self.passed}
        p = os.path.join(self.out_dir, MANIFEST)
        with open(p, "w") as fh:
            json.dump(doc, fh, indent=1, sort_keys=True)
            fh.write("\n")
        return p


def load_manifest(path):
    if os.path.isdir(path):
        path = os.path.join(path, MANIFEST)
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError as exc:
        raise ManifestError(f"manifest {path} does not exist") from exc
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ManifestError(f"manifest {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("suites"), list) or not isinstance(doc.get("files"), list):
        raise ManifestError(f"manifest {path} lacks 'suites' or 'files'")
    for s in doc["suites"]:
        if not isinstance(s, dict) or "name" not in s or "passed" not in s:
            raise ManifestError(f"manifest {path} has a malformed suite entry")
    return doc


def _fmt(v):
    return repr(v) if isinstance(v, float) else str(v)


def summarize(path, verify=False):
    """One line per suite: ``PASS``/``FAIL``, name and headline numbers.

    With ``verify``, also re-hash every listed file and report mismatches.
    """
    doc = load_manifest(path)
    lines = []
    for s in doc["suites"]:
        head = " ".join(f"{k}={_fmt(v)}" for k, v in sorted((s.get("headline") or {}).items()))
        tag = "PASS" if s["passed"] else "FAIL"
        extra = f" report={s['report']}" if s.get("report") and not s["passed"] else ""
        lines.append(f"{tag} {s['name']} {head}{extra}".rstrip())
    if verify:
        base = os.path.dirname(os.path.abspath(path if not os.path.isdir(path) else os.path.join(path, MANIFEST)))
        for f in doc["files"]:
            p = os.path.join(base, f["path"])
            if not os.path.exists(p) or sha256_file(p) != f["sha256"]:
                lines.append(f"FAIL hash {f['path']}")
    return lines
