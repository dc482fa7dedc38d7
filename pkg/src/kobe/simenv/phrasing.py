"""Canonical instruction phrasing and its inverse (label-based grounding).

``ground(phrase(a, els), els) == a`` holds for every element-targeted action
on a screen with unique labels; tests check this over all sample screens.
"""

from __future__ import annotations

import re
from typing import Sequence

from ..errors import GroundingFailed
from ..graph import DeviceAction, UiElement

COMPLETE_SENTINEL = "Mark the task as complete"
BACK_INSTRUCTION = "Press the system back button"
HOME_INSTRUCTION = "Press the home button"
WAIT_INSTRUCTION = "Wait for the screen to update"


def _label(elements: Sequence[UiElement], element_id: str | None) -> str | None:
    for element in elements:
        if element.element_id == element_id:
            return element.label
    return None


def phrase(action: DeviceAction, elements: Sequence[UiElement]) -> str:
    label = _label(elements, action.target_element)
    if action.kind == "tap":
        if label is not None:
            return f"Tap the {label}"
        if action.point is not None:
            return f"Tap at ({action.point[0]}, {action.point[1]})"
        return f"Tap the {action.target_element}"
    if action.kind == "type_text":
        return f"Type {action.text} into the {label}" if label else f"Type {action.text}"
    if action.kind == "swipe":
        return f"Swipe {action.direction} on the {label}" if label else f"Swipe {action.direction}"
    if action.kind == "back":
        return BACK_INSTRUCTION
    if action.kind == "home":
        return HOME_INSTRUCTION
    if action.kind == "wait":
        return WAIT_INSTRUCTION
    return f"Open the {action.text} app"


def page_description(screen_title: str, app_title: str) -> str:
    return f"{screen_title} of {app_title}"


_TYPE_INTO = re.compile(r"^type (?P<text>.+?) into the (?P<label>.+?)\.?$", re.I)
_TYPE = re.compile(r"^type (?P<text>.+?)\.?$", re.I)
_SWIPE = re.compile(r"^swipe (?P<dir>up|down|left|right)(?: on the (?P<label>.+?))?\.?$", re.I)
_TAP_AT = re.compile(r"^tap at \((?P<x>\d+), ?(?P<y>\d+)\)\.?$", re.I)
_OPEN_APP = re.compile(r"^open the (?P<app>.+?) app\.?$", re.I)
_VERB = re.compile(r"^(?:tap|click|select|press|toggle|open|choose)(?: on)? (?:the )?(?P<label>.+?)\.?$", re.I)


def _by_label(elements: Sequence[UiElement], label: str) -> UiElement | None:
    wanted = label.strip().lower()
    for element in elements:
        if element.label.lower() == wanted:
            return element
    return None


def ground(instruction: str, elements: Sequence[UiElement]) -> DeviceAction:
    """Resolve an instruction to one action by matching element labels."""
    text = instruction.strip()
    if not text:
        raise GroundingFailed("empty instruction")
    lowered = text.lower().rstrip(".")
    if lowered in (BACK_INSTRUCTION.lower(), "go back") or (
            lowered == "tap the back button" and _by_label(elements, "back button") is None):
        return DeviceAction("back")
    if lowered == HOME_INSTRUCTION.lower():
        return DeviceAction("home")
    if lowered.startswith("wait"):
        return DeviceAction("wait")
    if m := _TYPE_INTO.match(text):
        target = _by_label(elements, m["label"])
        if target is None:
            raise GroundingFailed(f"no element labeled {m['label']!r}")
        return DeviceAction.type_text(m["text"], target.element_id)
    if m := _TYPE.match(text):
        if not any(e.kind == "text_field" for e in elements):
            raise GroundingFailed("no text field to type into")
        return DeviceAction.type_text(m["text"])
    if m := _SWIPE.match(text):
        if m["label"] is None:
            return DeviceAction.swipe(m["dir"].lower())
        target = _by_label(elements, m["label"])
        if target is None:
            raise GroundingFailed(f"no element labeled {m['label']!r}")
        return DeviceAction.swipe(m["dir"].lower(), target.element_id)
    if m := _TAP_AT.match(text):
        return DeviceAction("tap", point=(int(m["x"]), int(m["y"])))
    if m := _OPEN_APP.match(text):
        return DeviceAction("open_app", text=m["app"])
    if m := _VERB.match(text):
        target = _by_label(elements, m["label"])
        if target is not None:
            return DeviceAction.tap(target.element_id)
    # Last resort: the longest label mentioned anywhere in the instruction.
    mentioned = [e for e in elements if e.label and e.label.lower() in lowered]
    if mentioned:
        best = max(mentioned, key=lambda e: (len(e.label), e.element_id))
        return DeviceAction.tap(best.element_id)
    raise GroundingFailed(f"cannot ground {instruction!r}")
