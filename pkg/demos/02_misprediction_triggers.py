"""Four ways to make the return predictor wrong.

The return-stack buffer (RSB) is a tiny ring of predicted return
addresses, pushed on call and popped on return. Anything that makes the
stack in memory disagree with the ring - deeper recursion than the ring
holds, a context switch that overwrites entries, rewinding sp past live
frames, or simply storing over a return address - makes the core
speculate down a path the program will never take.

Each demo below prints one row per architectural return: where the
return executed, where the predictor sent speculation, and where the
program really went.

Run:  python3 demos/02_misprediction_triggers.py
"""

from rsbsim import RsbVariant
from rsbsim.scenarios.triggers import (
    run_context_switch, run_deep_chain, run_return_overwrite,
    run_stack_switch,
)


def show(title: str, report) -> None:
    print(f"--- {title} ---")
    for row in report.details["returns"]:
        mark = "ok " if row["correct"] else "MIS"
        print(f"  {mark}  ret in {row['ret_in']:<9} predicted "
              f"{row['predicted']:<9} actual {row['actual']}")
    for note in report.notes:
        print(f"  ({note})")
    print()


def main() -> None:
    # 1. A call chain deeper than the ring. The first four returns pop
    # real entries; after that the ring has wrapped, and every prediction
    # points four call-levels too high.
    show("deep call chain, 4-entry ring", run_deep_chain())

    # Same chain with the stop-on-underflow policy: instead of serving
    # wrapped garbage the predictor declines, and the core just stalls.
    show("same chain, stop-on-underflow policy",
         run_deep_chain(variant=RsbVariant.STOP_ON_UNDERFLOW))

    # 2. A context switch. The kernel's own returns overwrite the top
    # entries, so the first returns after switching back are predicted
    # into kernel addresses.
    show("context switch overwrites the top entries", run_context_switch())

    # 3. Rewinding sp to an outer frame. The abandoned inner frames left
    # their entries in the ring; the next three returns all follow them.
    show("sp rewound past three live frames", run_stack_switch())

    # 4. Storing over the return address. The architectural return reads
    # memory; the prediction still follows the ring.
    show("return address overwritten in memory", run_return_overwrite())


if __name__ == "__main__":
    main()
