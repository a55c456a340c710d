import sys
from tqdm import tqdm

# stdout is reserved for results; everything here goes to stderr.

def log(label, message):
    tqdm.write(f"[{label}] {message}", file=sys.stderr)


def progress(iterable, desc, total=None, disable=False):
    return tqdm(iterable, desc=desc, total=total, disable=disable, file=sys.stderr, leave=False)
