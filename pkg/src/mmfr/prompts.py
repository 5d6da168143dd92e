"""Prompt templates for every model-facing stage.

Builders substitute user content into a fixed template with plain
string replacement: no escaping is applied, each placeholder is filled
exactly once, and two calls with equal inputs produce byte-identical
prompts. The literal marker strings these templates mandate
("No Problem", the answer tag, the caption heading, the
Analysis/Judgment lines) are load-bearing: the parsers in
``mmfr.stages`` and ``mmfr.filters`` are written against them.
"""

from __future__ import annotations

QUESTION_SLOT = "{question}"
INSTRUCTION_SLOT = "{instruction}"
OUTPUT_TAIL_SLOT = "{output_tail}"
SOLUTION_SLOT = "{solution}"
RESPONSE_SLOT = "{response}"


def _fill(template: str, **slots: str) -> str:
    out = template
    for name, value in slots.items():
        out = out.replace("{" + name + "}", value, 1)
    return out


# ---------------------------------------------------------------------------
# Question cleaning
# ---------------------------------------------------------------------------

CLEAN_ERROR_TYPES = (
    "translation",
    "irrelevant content",
    "non-answer question",
    "low-quality instruction",
)

CLEAN_TEMPLATE = """Task. Clean the given question text by following these steps.

Error types

1. Translation
- Translate the question into English.
- If the question is already in English, keep it as is.

2. Irrelevant content
- Remove all irrelevant links, advertisements, signatures, emails, special symbols, or repeated punctuation.
- Remove Markdown watermarks, unrelated tables, or redundant markings in formulas.
- Remove question numbers, IDs, or scoring information that appears before the actual question (e.g., "Q12.", "(5 points)", "1.").
- Do not consider an <image> tag at the beginning of a question as irrelevant content.

3. Non-answer question
- Questions that are not actual problem-solving questions, e.g., asking to draw a diagram or write code, should be marked under this error type.
- Questions that are incomplete to the point that they cannot be answered.

4. Low-quality instruction
- If the question contains instructions that may reduce reasoning quality (e.g., "just give the answer", "do not think", "give me the final answer only"), rewrite these into instructions that encourage thoughtful reasoning (e.g., "provide a clear reasoning process before the final answer").

Output rules

- If the question has no issues (no translation or cleaning needed), output:
No Problem

- If the question has issues, output JSON in the following format:
{
"error_type": ["translation", "irrelevant content"], // only "translation", "irrelevant content", "non-answer question" and "low-quality instruction"
"corrected_text": "Cleaned and translated version of the question (leave empty if non-answer question)"
}

Examples

Example 1

Input:
What is this? https://example.com

Output:
{
"error_type": ["translation", "irrelevant content"],
"corrected_text": "What is this?"
}

Example 2

Input:
Please directly answer the question: what are the roots of this equation?

Output:
{
"error_type": ["translation", "low-quality instruction"],
"corrected_text": "Please provide a clear reasoning process before giving the roots of this equation."
}

Example 3

Input:
{question}

Output:
"""


def build_clean_prompt(question: str) -> str:
    if not question:
        raise ValueError("question must be non-empty")
    return _fill(CLEAN_TEMPLATE, question=question)


# ---------------------------------------------------------------------------
# Answer extraction
# ---------------------------------------------------------------------------

EXTRACTION_TEMPLATE = r"""You are a precise math answer extractor. Your task is to read the user's question and the provided solution, then extract ONLY the final answer(s).

Output EXACTLY one <answer>...</answer> tag containing only the final answer, with no extra text or explanations.

Extraction Rules (Follow in order of priority)

1. Top Priority (\boxed{...}). If a final \boxed{...} is present, output its INNER CONTENT EXACTLY as written, preserving all LaTeX, symbols, and text. This rule takes precedence over all other rules (including the unit rule). Ensure the extracted content is complete (e.g., balanced braces).
2. Final Result (No Box). If no \boxed{...} is found, extract the final explicit numerical or symbolic result (e.g., after "final answer is", "answer is", "Thus", "Therefore").
3. LaTeX Preservation. When applying Rule 2, preserve all LaTeX expressions and symbols (e.g., \sqrt{...}, \infty, \frac{...}{...}, \pi). Do NOT convert LaTeX to plain numbers or words.
4. No Simplification. Do NOT convert words to digits, rewrite mixed numbers, or simplify fractions unless they already appear that way in the final result.
5. Unit Stripping (No Box Only). If applying Rule 2 (i.e., no \boxed{...} was found), do NOT include units (e.g., cm, dollars, ways). Exception: Always keep the percent sign (%).
6. Multiple Solutions. If the final answer lists multiple distinct values (e.g., "x=5 or x=10", "the roots are -1 and 1"), output them as a single, comma-separated string (e.g., "5, 10", "-1, 1").
7. Word Answers. If the solution's final answer is a definitive word (e.g., "Yes", "No", "True", "False", "None", "Cannot be determined"), extract that word.
8. Not Found. If no specific, concise answer (mathematical, expression, or definitive word) can be found, respond with <answer></answer>.

Examples

Example 1 (Boxed).
Solution: ...blah blah... The answer is $\boxed{10}$.
Respond with: <answer>10</answer>

Example 2 (Boxed with LaTeX).
Solution: ...so the value is $\boxed{\frac{\sqrt{3}}{2}}$.
Respond with: <answer>\frac{\sqrt{3}}{2}</answer>

Example 3 (Boxed with Units - Rule 1 Precedence).
Solution: ...the final area is $\boxed{24 \text{ cm}^2}$.
Respond with: <answer>24 \text{ cm}^2</answer>

Example 4 (No Box with Units - Rule 5 Applies).
Solution: ...Therefore, the length is 40 meters.
Respond with: <answer>40</answer>

Example 5 (No Box with Percent - Rule 5 Exception).
Solution: ...The total increase was 15.5%.
Respond with: <answer>15.5%</answer>

Example 6 (Multiple Solutions).
Solution: ...the roots of the equation are $x = -2$ or $x = 5$.
Respond with: <answer>-2, 5</answer>

Example 7 (Word Answer).
Solution: ...we can conclude that the statement is False.
Respond with: <answer>False</answer>

Example 8 (Not Found).
Solution: ...this completes the proof by induction.
Respond with: <answer></answer>

Task template

Question: {instruction}
Solution: {output_tail}
Respond with: <answer>...</answer>
"""


def build_extraction_prompt(instruction: str, output_tail: str) -> str:
    return _fill(EXTRACTION_TEMPLATE, instruction=instruction, output_tail=output_tail)


# ---------------------------------------------------------------------------
# Image captioning
# ---------------------------------------------------------------------------

STEM_CATEGORIES = (
    "Geometric Diagram",
    "Spatial Reasoning Scene",
    "Mathematical Plot / Chart",
    "Puzzle / Logic Diagram",
    "Textbook Illustration",
    "Physics / Mechanics Diagram",
    "Experimental Setup",
    "Astronomy / Space Visualization",
    "Molecular / Chemical Diagram",
    "Biological Structure",
    "Geological / Earth Science Diagram",
    "Circuit / Network Diagram",
    "Abstract Mathematical Representation",
    "Table / Matrix",
    "Diagram / Flowchart",
)

NATURAL_CATEGORIES = (
    "Natural Landscape Scene",
    "Urban / Street Scene",
    "Indoor / Interior Scene",
    "Human Portrait / Activity",
    "Sports / High-Motion Scene",
    "Animal / Wildlife Scene",
    "Product / Still Life Object",
    "Vehicle / Machinery Object",
    "Food / Beverage Item",
    "Document / Text Image",
    "Artwork / Illustration",
    "Technical / Surveillance / Medical",
)


def _bullet_list(items: tuple[str, ...]) -> str:
    return "\n".join(f"- {item}" for item in items)


CAPTION_TEMPLATE = (
    """You are a meticulous Multimodal Data Annotation Specialist. Your primary mission is to deconstruct multimodal tasks (consisting of images and text) and translate them into a highly structured and comprehensive natural language description. The goal is to create a "golden" reference text that is as unambiguous and detailed as a data file, which will be used to evaluate the accuracy of other AI models. Your adherence to the format described below is critical. You will be provided with a task that consists of up to two parts: one image, and its corresponding question text.

Guiding Principles for Analysis:

1. Category-First, Structure-Always: Your entire analysis begins with correctly identifying the image's category. The category list includes both STEM-style images and natural photographs (see the list below). This category dictates the focus of your description. You must then follow the specified markdown structure precisely for your output.
2. Separate What is Seen from What is Inferred: Your description must maintain a strict separation between elements explicitly visible in the image and properties inferred from the accompanying text. The output format has dedicated sections for this.
3. Comprehensive and Atomic Breakdown: Every single element in the image must be described individually within the "Explicit Component Breakdown" section. For natural images this includes people (pose, clothing, objects held), everyday objects, scene elements (furniture, roads, sky, vehicles), background structures, and animals, plants, food, tools, etc. Treat each as a standalone component.
4. Holistic Synthesis: The image and question text are a single unit. Use the text to define roles, identify actions, or extract inferred properties.

Instructions for Structuring Your Output

You must generate a single text block. The response must be structured using markdown with headings, bolded keywords, and bullet points exactly as specified below.

For each image provided, create a complete descriptive block starting with:

### Image [N]: [Primary Category Name]

Required Output Structure:

- Heading. `### Image [N]: [Primary Category Name]` (replace [N] with the image number, and [Primary Category Name] with the category you identify from the list below).
- Scene Summary. A single, concise sentence that describes the overall purpose and content of the image.
- Explicit Component Breakdown. (This section is for visible elements only.)
  - [Component Name] (`[label]`): A description of the component. The [label] should be the exact text or symbol labeling the component in the image. If there is no label, use None.
  - Repeat for every single visible component: objects, vectors, surfaces, axes, points, everyday objects, people, clothing, background structures, etc.
- Interactions and Relationships. (This section describes how the explicit components are connected and arranged.)
  - Describe spatial and structural connections.
  - Describe logical or physical relationships (e.g., contact, holding, containment, occlusion).
  - Trace directional flows (arrows/process steps) or describe data trends (charts/graphs).
- Implicit and Inferred Properties. (This section is only for information derived from the question text or domain conventions, not explicitly drawn.) List every piece of non-visual information here.
- Identified Ambiguities. (If any part of the image is illegible or unclear, list it here. If none, state "None".)

Reference Guide: Image Categories

STEM / Diagrammatic Categories

"""
    + _bullet_list(STEM_CATEGORIES)
    + """

Natural Image Categories

"""
    + _bullet_list(NATURAL_CATEGORIES)
    + """

Now, analyze the provided image and question text, and produce the structured natural language description in this exact format:

{question}
"""
)


def build_caption_prompt(question: str) -> str:
    return _fill(CAPTION_TEMPLATE, question=question)


# ---------------------------------------------------------------------------
# Long chain-of-thought distillation
# ---------------------------------------------------------------------------

DISTILL_TEMPLATE = """You are an expert in science and visual reasoning with advanced capabilities in multimodal analysis.
Your response will be used as a high-quality example to train a new AI model.
Solve the problem efficiently and clearly by integrating all information from multimodal inputs.

Core Principles

1. Equal Weight to All Inputs. Information from images (photos, charts, graphs, diagrams, tables, handwritten notes) is as important as text. Never ignore visual elements.
2. Systematic Analysis. Follow a rigorous, reproducible approach for every problem.
3. Precision and Accuracy. Double-check all calculations and reasoning steps.
4. Adaptive Reasoning. Choose the most appropriate method based on the specific problem context.

Solution Framework

Phase 1: Comprehensive Information Extraction
- Carefully analyze all text content for requirements, constraints, and given values.
- Thoroughly examine all visual elements, extracting every piece of relevant information.
- Note measurements, relationships, patterns, and any implicit information.
- Explicitly connect visual and textual information when they relate to each other.

Phase 2: Strategic Problem Setup
- Compile all extracted information in an organized manner.
- Clearly state what needs to be found or proven.
- Identify the most relevant scientific principles and methodologies.
- Consider what assumptions may be necessary and state them explicitly.

Phase 3: Rigorous Solution Execution
- Present your solution with complete logical flow.
- Show all mathematical steps with proper notation.
- When using formulas, present them clearly, substitute values, and then calculate.
- Reference specific parts of visual inputs when they support your reasoning.
- Maintain unit consistency throughout all calculations.
- Keep appropriate precision and significant figures.

Phase 4: Solution Validation
- Verify your answer makes scientific and logical sense.
- Check that all parts of the question have been addressed.
- For multiple choice questions, confirm your selection and briefly justify if needed.
- Ensure dimensional analysis is correct.

Key Reminders
- Visual information is never supplementary - it is integral to the solution.
- Every piece of data from images must be considered.
- Your reasoning should be so clear that someone could follow it without seeing the images.
- When in doubt, show more work rather than less.
- Connect each step logically to build a complete solution narrative.

Answer Format Guidelines

Determine the nature of your answer:

- If the problem has a definitive, fixed answer (numerical value, specific choice, exact result): present your complete reasoning and solution process, and at the end clearly state:
  Therefore, the final answer is <answer>YOUR_ANSWER</answer>
  (with the actual answer substituted for YOUR_ANSWER). Examples: <answer>5.2 m/s</answer>, <answer>C</answer>, <answer>2.5 m, 30°</answer>.
- If the problem requires explanation, discussion, or has no single fixed answer: focus on presenting your points clearly and in a structured manner, and provide a full analysis and explanation. You may include examples, reasoning steps, or possible conclusions, but a single "correct" answer wrapped with <answer> tags is not required.

Problem: {question}

Analyze all provided materials carefully, think through the problem step by step, and provide a comprehensive solution that demonstrates mastery of both scientific reasoning and visual analysis.

Final line constraint

The last line of your response must be exactly:

"Therefore, the final answer is <answer>ANSWER</answer>."
"""


def build_distill_prompt(question: str) -> str:
    return _fill(DISTILL_TEMPLATE, question=question)


# ---------------------------------------------------------------------------
# Answer verification (consistency judging)
# ---------------------------------------------------------------------------

VERIFY_TEMPLATE = """You are an expert evaluator. Compare the reference and generated answers only for semantic correctness and factual agreement.

Task
Determine whether the two answers express the same correct solution. Focus on meaning, correctness, and final results rather than wording or format.

Evaluation Guidance
- Equivalent: same conclusion or final answer, no substantive factual differences.
- Different: conflicting conclusions, missing required reasoning, or any factual mistake in the generated answer.

Input Question

{question}

Reference Answer

{solution}

Generated Answer

{response}

Output Instructions
Respond in the following two-line format (no extra text):
Analysis: <concise reasoning>
Judgment: <Equivalent or Different>
"""


def build_verify_prompt(question: str, solution: str, response: str) -> str:
    return _fill(VERIFY_TEMPLATE, question=question, solution=solution, response=response)
