"""Toy JSON-lines pair scorer used by the protocol tests.

Logit = token overlap between query and candidate, with a fixed bias for
the NULL entry.  Flags let tests provoke protocol failures:

  --fail-id ID        answer that request id with an error response
  --garbage-once      emit one non-JSON line before behaving again
  --wrong-arity-id ID answer that id with one logit too few
"""

from __future__ import annotations

import argparse
import json
import sys


def logit_for(query: str, candidate: str) -> float:
    if candidate == "NULL":
        return 0.25
    q_tokens = set(query.lower().split())
    c_tokens = set(candidate.lower().split())
    if not q_tokens or not c_tokens:
        return 0.0
    return 2.0 * len(q_tokens & c_tokens) / len(q_tokens | c_tokens)


def main() -> int:
    parser = argparse.ArgumentParser()
    parser.add_argument("--fail-id")
    parser.add_argument("--garbage-once", action="store_true")
    parser.add_argument("--wrong-arity-id")
    args = parser.parse_args()
    garbage_pending = args.garbage_once

    for line in sys.stdin:
        line = line.strip()
        if not line:
            continue
        request = json.loads(line)
        if garbage_pending:
            garbage_pending = False
            sys.stdout.write("this is not json\n")
            sys.stdout.flush()
            continue
        if args.fail_id and request["id"] == args.fail_id:
            response = {"id": request["id"], "error": "induced failure"}
        else:
            logits = [logit_for(request["query"], c) for c in request["candidates"]]
            if args.wrong_arity_id and request["id"] == args.wrong_arity_id:
                logits = logits[:-1]
            response = {"id": request["id"], "logits": logits}
        sys.stdout.write(json.dumps(response) + "\n")
        sys.stdout.flush()
    return 0


if __name__ == "__main__":
    sys.exit(main())
