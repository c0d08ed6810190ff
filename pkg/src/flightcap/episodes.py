"""Free-flight episode detection in full-sequence 2D object tracks."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from flightcap.ballistics import ObservationTrack
from flightcap.errors import ContactSwitchMismatch, TrackTooShort
from flightcap.scene import CATCH, RELEASE, ContactEvent, Episode

SHARED_PARAMETERS = ("f", "g", "l")


@dataclass
class EpisodeSegmentation:
    windows: List[Tuple[int, int]]
    switches: List[int] = field(default_factory=list)
    shared_parameters: Tuple[str, ...] = SHARED_PARAMETERS

    def episodes(self) -> List[Episode]:
        """Windows as Episodes; a window starting where the previous one ended
        continues the same multi-episode, a gap starts a new one."""
        out = []
        group = 0
        for i, (s, e) in enumerate(self.windows):
            if i > 0 and s > self.windows[i - 1][1]:
                group += 1
            out.append(Episode(s, e, group))
        return out

    def tracks(self, track2d, frame_rate: float, valid=None) -> List[ObservationTrack]:
        track2d = np.asarray(track2d, dtype=float)
        if valid is None:
            valid = np.all(np.isfinite(track2d), axis=1)
        out = []
        for s, e in self.windows:
            idx = np.arange(s, e + 1)
            out.append(ObservationTrack(track2d[idx], frame_rate, idx - s, valid[idx]))
        return out


def _opposed(v1: np.ndarray, v2: np.ndarray) -> bool:
    if v1 @ v2 >= 0:
        return False
    d = int(np.argmax(np.abs(v1) + np.abs(v2)))
    return np.sign(v1[d]) != np.sign(v2[d]) and v1[d] != 0 and v2[d] != 0


def detect_switches(track2d, window: int = 5, velocity_threshold: float = 10.0,
                    valid: Optional[np.ndarray] = None) -> List[int]:
    """Frames where one flight ends and the next begins.

    A sliding window is split into a leading and trailing half of frame-to-frame
    displacements. A switch needs the two mean velocities to point in opposite
    directions *and* their speeds to differ by more than ``velocity_threshold``
    px/frame; the speed test rejects the symmetric reversal at a ballistic apex. Windows
    that run past either end of the track or cover invalid frames are skipped.
    Adjacent firing windows are merged into the one with the largest
    velocity reversal.
    """
    track2d = np.asarray(track2d, dtype=float).reshape(-1, 2)
    n = len(track2d)
    if window < 3:
        raise ValueError("window must cover at least 3 frames")
    if n < window:
        raise TrackTooShort(f"track has {n} frames, window needs {window}")
    if valid is None:
        valid = np.all(np.isfinite(track2d), axis=1)
    half = (window - 1) // 2
    cands = []
    for s in range(n - window + 1):
        if not valid[s:s + window].all():
            continue
        d = np.diff(track2d[s:s + window], axis=0)
        v1 = d[:half].mean(axis=0)
        v2 = d[-half:].mean(axis=0)
        if not _opposed(v1, v2):
            continue
        if abs(float(np.linalg.norm(v2) - np.linalg.norm(v1))) > velocity_threshold:
            # the window centred on the switch sees the largest reversal
            cands.append((s + half, float(np.linalg.norm(v2 - v1))))

    switches = []
    group = []
    for frame, score in cands:
        if group and frame - group[-1][0] > 1:
            switches.append(max(group, key=lambda c: c[1])[0])
            group = []
        group.append((frame, score))
    if group:
        switches.append(max(group, key=lambda c: c[1])[0])
    return switches


def build_multi_episode(track2d, switches: Sequence[int], contacts: Sequence[ContactEvent] = (),
                        valid: Optional[np.ndarray] = None, min_length: int = 3) -> EpisodeSegmentation:
    """Flight windows from detected switches, overridden by annotated contacts.

    Switches split the observed span into segments. Inside a segment a
    release annotation moves the window start and a catch annotation moves its
    end; several release/catch pairs split it further. Contacts must alternate
    release, catch within each segment. Windows shorter than ``min_length``
    frames are dropped.
    """
    track2d = np.asarray(track2d, dtype=float).reshape(-1, 2)
    if valid is None:
        valid = np.all(np.isfinite(track2d), axis=1)
    seen = np.flatnonzero(valid)
    if len(seen) == 0:
        return EpisodeSegmentation([], list(switches))
    first, last = int(seen[0]), int(seen[-1])
    bounds = [first] + sorted(s for s in set(switches) if first < s < last) + [last]
    events = sorted(contacts, key=lambda c: (c.frame, 0 if c.side == CATCH else 1))

    windows = []
    for a, b in zip(bounds[:-1], bounds[1:]):
        seg = [c for c in events
               if a <= c.frame <= b
               and not (c.side == CATCH and c.frame == a and a != first)
               and not (c.side == RELEASE and c.frame == b and b != last)]
        start, open_ = a, False
        saw_release = False
        for c in seg:
            if c.side == RELEASE:
                if open_:
                    raise ContactSwitchMismatch(f"two releases without a catch in segment [{a}, {b}] "
                                                f"(frame {c.frame})")
                start, open_, saw_release = c.frame, True, True
            else:
                if not open_ and (saw_release or any(x.side == RELEASE for x in seg if x.frame > c.frame)):
                    raise ContactSwitchMismatch(f"catch at frame {c.frame} precedes its release in segment [{a}, {b}]")
                windows.append((start, c.frame))
                open_ = False
                start = c.frame
        if open_ or not seg or seg[-1].side == RELEASE:
            windows.append((start, b))
        elif not any(c.side == RELEASE for c in seg) and seg[-1].side == CATCH and seg[-1].frame < b:
            # flight already under way at the segment start, caught before its end
            pass
    windows = [(s, e) for s, e in windows if e - s + 1 >= min_length]
    return EpisodeSegmentation(windows, list(switches))
