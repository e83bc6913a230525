"""Prompt-text constants: operator instructions, SFT dialog framing, negative prompts.

These strings are wire payloads. Editing them changes cache keys, golden
renderings, and emitted dataset bytes, so treat every character as load-bearing.
"""

from __future__ import annotations

# ---------------------------------------------------------------------------
# Evolutionary operator instruction (text-to-video default).
# Rendered with {offspring_count}; the scored candidate list is appended below it.
# ---------------------------------------------------------------------------

_T2V_OPERATOR_INSTRUCTION = """\
You need to refine user's input prompt. The user's input prompt is used for video generation task. You need to refine the user's prompt to make it more suitable for the task. Here are some examples of refined prompts:
a close-up shot of a woman standing in a room with a white wall and a plant on the left side. the woman has curly hair and is wearing a green tank top. she is looking to the side with a neutral expression on her face. the lighting in the room is soft and appears to be natural, coming from the left side of the frame. the focus is on the woman, with the background being out of focus. there are no texts or other objects in the video. the style of the video is a simple, candid portrait with a shallow depth of field.
a serene scene of a pond filled with water lilies. the water is a deep blue, providing a striking contrast to the pink and white flowers that float on its surface. the flowers, in full bloom, are the main focus of the video. they are scattered across the pond, with some closer to the camera and others further away, creating a sense of depth. the pond is surrounded by lush greenery, adding a touch of nature to the scene. the video is taken from a low angle, looking up at the flowers, which gives a unique perspective and emphasizes their beauty. the overall composition of the video suggests a peaceful and tranquil setting, likely a garden or a park.
a serene scene in a park. the sun is shining brightly, casting a warm glow on the lush green trees and the grassy field. the camera is positioned low, looking up at the towering trees, which are the main focus of the image. the trees are dense and full of leaves, creating a canopy of green that fills the frame. the sunlight filters through the leaves, creating a beautiful pattern of light and shadow on the ground. the overall atmosphere of the video is peaceful and tranquil, evoking a sense of calm and relaxation.
a scene where a person is examining a dog. the person is wearing a blue shirt with the word "volunteer" printed on it. the dog is lying on its side, and the person is using a stethoscope to listen to the dog's heartbeat. the dog appears to be a golden retriever and is looking directly at the camera. the background is blurred, but it seems to be an indoor setting with a white wall. the person's focus is on the dog, and they seem to be checking its health. the dog's expression is calm, and it seems to be comfortable with the person's touch. the overall atmosphere of the video is calm and professional.
The refined prompt should pay attention to all objects in the video. The description should be useful for AI to re-generate the video. The description should be no more than six sentences. The refined prompt should be in English.
User will provide an original prompt and your revised prompts, with their generated videos' scores (Visual Quality, Temporal Consistency, Dynamic Degree, Text Video Alignment, Factual Consistency, Aesthetic score, Image quality, 7 dimensions termed as VQ, TC, DD, TVA, FC, AES, MPS), and you need to give an improved prompt according to previous prompts and their scores on different dimensions.
Each prompt is tagged with an index, and the sentence labeled as 0 is the initial prompt. Each prompt is followed by (VQ, TC, DD, TVA, FC, AES, MPS) scores. You need build upon the most successful prompts and learn from the high-scoring prompts. You need to observe the scores of each prompt in different aspects, learn from the experiences of previous prompts, and combine their strengths to generate better prompts.
The new prompts should keep the same semantic meaning with original prompt, should not add extra scene changing or too many actions, which is hard for video generation.
Generate {offspring_count} paraphrases of the initial prompt which keep the semantic meaning and that have higher scores than all the prompts above. Respond with each new prompt in between <PROMPT> and </PROMPT>, e.g., <PROMPT>paraphrase 1</PROMPT>."""

OPERATOR_TEMPLATES: dict[str, str] = {
    "t2v-default": _T2V_OPERATOR_INSTRUCTION,
}

# ---------------------------------------------------------------------------
# SFT chat-dialog framing: user content is PREFIX + source prompt + SUFFIX.
# ---------------------------------------------------------------------------

_SFT_CHAT_PREFIX = (
    "You need to refine user's input prompt. The user's input prompt is used for "
    "video generation task. You need to refine the user's prompt to make it more "
    "suitable for the task. You will be prompted by people looking to create "
    "detailed, amazing videos. The way to accomplish this is to take their short "
    "prompts and make them extremely detailed and descriptive. You will only ever "
    "output a single video description per user request. You should refactor the "
    "entire description to integrate the suggestions. Original prompt:\n"
)
_SFT_CHAT_SUFFIX = "\n New prompt:\n"

SFT_TEMPLATES: dict[str, tuple[str, str]] = {
    "sft-chat-default": (_SFT_CHAT_PREFIX, _SFT_CHAT_SUFFIX),
}


def sft_user_content(source: str, template_id: str = "sft-chat-default") -> str:
    prefix, suffix = SFT_TEMPLATES[template_id]
    return prefix + source + suffix


def parse_sft_user_content(content: str, template_id: str = "sft-chat-default") -> str:
    """Invert sft_user_content, recovering the source prompt exactly."""
    prefix, suffix = SFT_TEMPLATES[template_id]
    if not content.startswith(prefix) or not content.endswith(suffix):
        raise ValueError("content does not match the SFT dialog template")
    return content[len(prefix):len(content) - len(suffix)]


# ---------------------------------------------------------------------------
# Negative prompts.
# ---------------------------------------------------------------------------

FIXED_NEGATIVE_PROMPT = (
    "The video is not of a high quality, it has a low resolution, and the audio "
    "quality is not clear. Strange motion trajectory, a poor composition and "
    "deformed video, low resolution, duplicate and ugly, strange body structure, "
    "long and strange neck, bad teeth, bad eyes, bad limbs, bad hands, rotating "
    "camera, blurry camera, shaking camera. Deformation, low-resolution, blurry, "
    "ugly, distortion."
)

NEGATIVE_ICL_INSTRUCTION = (
    "You write negative prompts for text-to-video generation. Given a refined "
    "video prompt, respond with a negative prompt: a comma-separated list of "
    "undesirable attributes and defects to steer generation away from, covering "
    "general video-quality failures plus failure modes specific to the input's "
    "subjects and actions. Use short descriptors, not full sentences, and never "
    "restate the input's subject or scene. Respond with the negative prompt only."
)

# Curated refined -> negative exemplar used as the default few-shot.
_NEGATIVE_EXAMPLE_POSITIVE = (
    "As the sun gently peeks through the vibrant window curtains, I sit comfortably "
    "in my plush, velvety chair, surrounded by an array of artfully arranged "
    "cosmetics. I begin by applying a lightweight, radiant foundation, seamlessly "
    "blending it into my skin with a fluffy brush. Next, I define my eyes with a "
    "rich, earthy eyeshadow, gradually building the palette with a pop of shimmering "
    "champagne on the lid. A swipe of deep, berry-stained lipstick completes my "
    "morning glow. I finish with a quick mist of hydrating toner and a light dusting "
    "of translucent powder, leaving my complexion fresh and flawless. The video "
    "captures my calm and focused routine, highlighting the beauty in the simplicity "
    "of a morning makeup ritual, as the natural light dancing through the room "
    "highlights the subtle, yet elegant enhancement of my daily beauty regimen."
)
_NEGATIVE_EXAMPLE_NEGATIVE = (
    "The video is not of a high quality, it has a low resolution. Strange motion "
    "trajectory. bad hands, missing fingers. deformation, distortion. Dark and "
    "unclear, blur, ugly, watermark, static. The person has bad anatomy, bad eyes, "
    "bad teeth, long and strange neck, bad hands, text, error, ugly appearance, "
    "deformed body, poorly drawn face, long body. The makeup is poorly applied, "
    "with uneven lines and clashing colors. The lip color is tacky and "
    "over-saturated, and the toner makes the skin look dull and oily. The camera "
    "work is shaky and poorly framed, with harsh lighting that accentuates "
    "imperfections."
)

DEFAULT_NEGATIVE_FEW_SHOTS: tuple[tuple[str, str], ...] = (
    (_NEGATIVE_EXAMPLE_POSITIVE, _NEGATIVE_EXAMPLE_NEGATIVE),
)


def negative_icl_prompt(positive: str, few_shots) -> str:
    parts = [NEGATIVE_ICL_INSTRUCTION, ""]
    for shot_positive, shot_negative in few_shots:
        parts.append(f"Refined prompt:\n{shot_positive}\nNegative prompt:\n{shot_negative}\n")
    parts.append(f"Refined prompt:\n{positive}\nNegative prompt:\n")
    return "\n".join(parts)
