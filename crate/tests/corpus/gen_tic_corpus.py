#!/usr/bin/env python3
"""Writes the TIC capture corpus and the readings each capture decodes to.

Standalone encoder: it shares no code with the Rust crates. Run from this
directory; outputs go to ./tic/.
"""

import json
import random
from datetime import datetime, timezone
from pathlib import Path

STX, ETX, LF, CR, HT, SP = 0x02, 0x03, 0x0A, 0x0D, 0x09, 0x20
OUT = Path(__file__).resolve().parent / "tic"


def checksum(span: bytes) -> int:
    return (sum(span) & 0x3F) + 0x20


def standard_group(label: str, value: str, ts: str | None = None) -> bytes:
    body = label.encode() + bytes([HT])
    if ts is not None:
        body += ts.encode() + bytes([HT])
    body += value.encode() + bytes([HT])
    return bytes([LF]) + body + bytes([checksum(body), CR])


def historic_group(label: str, value: str) -> bytes:
    span = label.encode() + bytes([SP]) + value.encode()
    return bytes([LF]) + span + bytes([SP, checksum(span), CR])


def frame(groups: list[bytes]) -> bytes:
    return bytes([STX]) + b"".join(groups) + bytes([ETX])


def horodate(t: int) -> str:
    return "H" + datetime.fromtimestamp(t, timezone.utc).strftime("%y%m%d%H%M%S")


def reading(meter, va, va_inj, east, eait, tariff):
    return {
        "ok": {
            "meter_id": meter,
            "apparent_power_va": va,
            "injected_apparent_power_va": va_inj,
            "energy_consumed_wh": east,
            "energy_injected_wh": eait,
            "tariff_label": tariff,
        }
    }


def standard_producer(rng, n=24):
    meter, t, east, eait = "021900000001", 1_735_736_400, 4_210_337, 918_004
    frames, expected = [], []
    for _ in range(n):
        t += 30
        draw = rng.randrange(0, 2500)
        inject = rng.randrange(0, 3200) if draw < 300 else 0
        east += draw * 30 // 3600
        eait += inject * 30 // 3600
        frames.append(
            frame(
                [
                    standard_group("ADSC", meter),
                    standard_group("VTIC", "02"),
                    standard_group("DATE", "", horodate(t)),
                    standard_group("NGTF", "BASE"),
                    standard_group("LTARF", "BASE"),
                    standard_group("EAST", f"{east:09d}"),
                    standard_group("EAIT", f"{eait:09d}"),
                    standard_group("SINSTS", f"{draw:05d}"),
                    standard_group("SINSTI", f"{inject:05d}"),
                ]
            )
        )
        expected.append(reading(meter, draw, inject, east, eait, "BASE"))
    return frames, expected


def standard_hphc(rng, n=16):
    meter, t, east = "021900000002", 1_735_768_800 - 8 * 30, 77_001
    frames, expected = [], []
    for _ in range(n):
        t += 30
        hour = datetime.fromtimestamp(t, timezone.utc).hour
        label = "HC" if hour < 6 or hour >= 22 else "HP"
        draw = rng.randrange(100, 6000)
        east += draw * 30 // 3600
        frames.append(
            frame(
                [
                    standard_group("ADSC", meter),
                    standard_group("DATE", "", horodate(t)),
                    standard_group("NGTF", "HC/HP"),
                    standard_group("LTARF", label),
                    standard_group("EAST", f"{east:09d}"),
                    standard_group("SINSTS", f"{draw:05d}"),
                    # label outside the supported subset, ignored
                    standard_group("MSG1", "PAS DE MESSAGE"),
                ]
            )
        )
        expected.append(reading(meter, draw, 0, east, 0, label))
    return frames, expected


def historic_consumer(rng, n=20):
    meter, base = "031762120032", 12_345_678
    frames, expected = [], []
    for i in range(n):
        papp = rng.randrange(0, 9000)
        base += papp * 30 // 3600
        ptec = "TH.."
        frames.append(
            frame(
                [
                    historic_group("ADCO", meter),
                    historic_group("OPTARIF", "BASE"),
                    historic_group("ISOUSC", "45"),
                    historic_group("BASE", f"{base:09d}"),
                    historic_group("PTEC", ptec),
                    historic_group("IINST", f"{papp // 230:03d}"),
                    historic_group("PAPP", f"{papp:05d}"),
                    historic_group("MOTDETAT", "000000"),
                ]
            )
        )
        expected.append(reading(meter, papp, 0, base, 0, "TH"))
    return frames, expected


def historic_hchc(n=6):
    meter, hc, hp = "031762120099", 5_000_000, 7_000_000
    frames, expected = [], []
    for i in range(n):
        hc += 11 * i
        hp += 7 * i
        frames.append(
            frame(
                [
                    historic_group("ADCO", meter),
                    historic_group("OPTARIF", "HC.."),
                    historic_group("HCHC", f"{hc:09d}"),
                    historic_group("HCHP", f"{hp:09d}"),
                    historic_group("PTEC", "HC.."),
                    historic_group("PAPP", "00420"),
                ]
            )
        )
        expected.append(reading(meter, 420, 0, hc + hp, 0, "HC"))
    return frames, expected


def corrupted(rng):
    """Good frames interleaved with damaged ones, behind line noise."""
    good, good_expected = standard_producer(rng, n=8)
    chunks, expected = [b"\x7f\x00garbage before the first frame\r\n"], []

    def keep(i):
        chunks.append(good[i])
        expected.append(good_expected[i])

    keep(0)
    # flip one bit of the EAST checksum byte
    bad = bytearray(good[1])
    east_at = bad.index(b"EAST")
    cr = bad.index(bytes([CR]), east_at)
    bad[cr - 1] ^= 0x04
    chunks.append(bytes(bad))
    expected.append({"error": "checksum"})
    keep(2)
    # flip one bit inside a value; the group checksum no longer matches
    bad = bytearray(good[3])
    sinsts_at = bad.index(b"SINSTS")
    bad[sinsts_at + 8] ^= 0x01
    chunks.append(bytes(bad))
    expected.append({"error": "checksum"})
    keep(4)
    # frame cut before ETX: the chunk runs to the next frame's ETX and
    # swallows it
    chunks.append(good[5][: len(good[5]) // 2])
    chunks.append(good[6])
    expected.append({"error": "framing"})
    # separator before the checksum replaced
    bad = bytearray(good[7])
    adsc_at = bad.index(b"ADSC")
    cr = bad.index(bytes([CR]), adsc_at)
    bad[cr - 2] = ord("x")
    chunks.append(bytes(bad))
    expected.append({"error": "framing"})
    # valid checksums but no ADSC group
    chunks.append(frame([standard_group("EAST", "000000001")]))
    expected.append({"error": "missing_label"})
    # non-numeric energy register with a valid checksum
    chunks.append(frame([standard_group("ADSC", "021900000001"), standard_group("EAST", "00000ABC1")]))
    expected.append({"error": "non_numeric"})
    keep(0)
    # trailing partial frame is not reported
    chunks.append(good[1][:10])
    return chunks, expected


def main():
    rng = random.Random(20250101)
    OUT.mkdir(parents=True, exist_ok=True)
    cases = {
        "standard_producer": ("standard", standard_producer(rng)),
        "standard_hphc": ("standard", standard_hphc(rng)),
        "historic_consumer": ("historic", historic_consumer(rng)),
        "historic_hchc": ("historic", historic_hchc()),
        "corrupted_standard": ("standard", corrupted(rng)),
    }
    manifest = {}
    for name, (mode, (chunks, expected)) in cases.items():
        (OUT / f"{name}.bin").write_bytes(b"".join(chunks))
        manifest[name] = {"mode": mode, "frames": expected}
    (OUT / "expected.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
