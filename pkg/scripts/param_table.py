"""Capsule-layer parameter and activation-memory arithmetic next to the quoted figures."""

from deformcaps.cli import human_bytes, param_table_rows

QUOTED = {
    "fully_connected": (671_088_640, 655e3),
    "deform_caps": (64_000, None),
    "conv_caps": (32_000, None),
    "splitcaps_detect": (512_000, 86e9),
    "splitcaps_imagenet": (6_400_000, 66e9),
}


def main():
    print(f"{'mode':<20} {'parameters':>13} {'quoted':>13} {'bytes':>12} {'quoted':>10}  note")
    for row in param_table_rows():
        want_p, want_b = QUOTED[row["mode"]]
        got_b = row["intermediate_bytes"]
        note = ""
        if want_b is not None and abs(got_b - want_b) / want_b > 0.02:
            note = f"off by {want_b / got_b:,.0f}x"
        quoted_b = human_bytes(int(want_b)) if want_b else "-"
        print(f"{row['mode']:<20} {row['parameters']:>13,} {want_p:>13,} {human_bytes(got_b):>12} {quoted_b:>10}  {note}")


if __name__ == "__main__":
    main()
