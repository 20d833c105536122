"""Regenerate src/calr/data/corpus.txt from standard-library docstrings.

The bundled file is committed; this script documents where it came from.
Output depends on the interpreter version, so rerunning may change it.
"""

import importlib
import inspect
import pkgutil
import sys
from pathlib import Path

TARGET_BYTES = 640 * 1024
SKIP = {"antigravity", "this", "idlelib", "test", "tkinter", "turtledemo", "lib2to3", "ensurepip"}


def docs_of(module):
    doc = inspect.getdoc(module)
    if doc:
        yield doc
    for name, obj in sorted(vars(module).items()):
        if name.startswith("_") or getattr(obj, "__module__", None) != module.__name__:
            continue
        for target in [obj] + [m for _, m in sorted(vars(obj).items())] if inspect.isclass(obj) else [obj]:
            d = inspect.getdoc(target)
            if d and len(d) > 80:
                yield d


def main(out: Path) -> None:
    names = sorted(
        m.name for m in pkgutil.iter_modules()
        if m.name in sys.stdlib_module_names and m.name not in SKIP and not m.name.startswith("_")
    )
    chunks, size, seen = [], 0, set()
    for name in names:
        try:
            module = importlib.import_module(name)
        except Exception:
            continue
        for doc in docs_of(module):
            text = doc.encode("ascii", errors="ignore").decode()
            if text in seen:
                continue
            seen.add(text)
            chunks.append(text.strip() + "\n\n")
            size += len(chunks[-1])
        if size >= TARGET_BYTES:
            break
    out.write_text("".join(chunks)[:TARGET_BYTES])


if __name__ == "__main__":
    main(Path(__file__).resolve().parents[1] / "src" / "calr" / "data" / "corpus.txt")
