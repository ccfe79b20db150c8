"""Write the Bach chorales bundled with music21 as MIDI files.

    pip install music21
    python tools/chorales_to_midi.py OUT_DIR

The files feed `editroll ingest` and the corpus-metrics acceptance check
(point EDITROLL_CHORALES at OUT_DIR).
"""

import sys
from pathlib import Path

from music21 import corpus


def main() -> int:
    if len(sys.argv) != 2:
        print(__doc__)
        return 2
    out = Path(sys.argv[1])
    out.mkdir(parents=True, exist_ok=True)
    written = skipped = 0
    for score in corpus.chorales.Iterator(returnType="stream"):
        if score is None or len(score.parts) != 4:
            skipped += 1
            continue
        number = score.metadata.number if score.metadata else None
        name = f"chorale-{written:03d}" if number is None else f"bwv{number}"
        path = out / f"{name}.mid"
        if path.exists():
            path = out / f"{name}-{written:03d}.mid"
        score.write("midi", fp=str(path))
        written += 1
    print(f"{written} written, {skipped} skipped")
    return 0


if __name__ == "__main__":
    sys.exit(main())
