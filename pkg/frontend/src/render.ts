// Pure HTML renderers. Keeping these free of DOM access makes the whole
// visual layer testable under node, and guarantees that identical gateway
// responses render identical markup (the reload-reconstruction invariant).

import type {
    PendingChoice,
    RoundSummary,
    SessionView,
} from "./types.js";

export type UrlResolver = (path: string) => string;

export function escapeHtml(text: string): string {
    return text
        .replace(/&/g, "&amp;")
        .replace(/</g, "&lt;")
        .replace(/>/g, "&gt;")
        .replace(/"/g, "&quot;")
        .replace(/'/g, "&#39;");
}

function formatScore(score: number | null): string {
    return score === null ? "unscored" : `score ${score.toFixed(1)}`;
}

export function renderCandidateGrid(
    pending: PendingChoice,
    resolve: UrlResolver,
): string {
    const cards = pending.candidates
        .map(
            (candidate) => `
  <figure class="candidate-card" data-position="${candidate.position}">
    <img src="${resolve(candidate.image.url)}" alt="candidate ${candidate.position}" />
    <figcaption>
      <span class="score-badge">${formatScore(candidate.score)}</span>
      <span class="seed">seed ${candidate.seed}</span>
    </figcaption>
  </figure>`,
        )
        .join("\n");
    return `<section class="candidate-grid" aria-label="candidates for ${escapeHtml(
        pending.instruction,
    )}">${cards}\n</section>`;
}

export function renderTimelineEntry(
    entry: RoundSummary,
    resolve: UrlResolver,
): string {
    return `
  <li class="timeline-entry" data-round="${entry.round}">
    <header>Round ${entry.round + 1}: ${escapeHtml(entry.instruction)}</header>
    <div class="thumbs">
      <img class="thumb-input" src="${resolve(entry.input_image.url)}" alt="input" />
      <img class="thumb-mask" src="${resolve(entry.mask.overlay_url)}" alt="mask overlay" />
      <img class="thumb-output" src="${resolve(entry.output_image.url)}" alt="output" />
    </div>
    <p class="loc-prompt">${escapeHtml(entry.localization_prompt)}</p>
    <p class="mdf-plan">${escapeHtml(entry.modification_plan)}</p>
    <span class="source">${entry.selection_source === "human" ? "your pick" : "auto-selected"}</span>
  </li>`;
}

export function renderTimeline(view: SessionView, resolve: UrlResolver): string {
    const entries = view.timeline
        .map((entry) => renderTimelineEntry(entry, resolve))
        .join("\n");
    return `<ol class="timeline">${entries}\n</ol>`;
}

export interface DetailOptions {
    showOverlay: boolean;
    sliderPercent: number; // 0 = pure before, 100 = pure after
}

export function renderDetailPanel(
    entry: RoundSummary,
    options: DetailOptions,
    resolve: UrlResolver,
): string {
    const maskUrl = options.showOverlay ? entry.mask.overlay_url : entry.mask.url;
    const percent = Math.max(0, Math.min(100, options.sliderPercent));
    return `
<aside class="detail-panel" data-round="${entry.round}">
  <h3>Round ${entry.round + 1}</h3>
  <dl>
    <dt>Region</dt><dd class="detail-loc">${escapeHtml(entry.localization_prompt)}</dd>
    <dt>Plan</dt><dd class="detail-plan">${escapeHtml(entry.modification_plan)}</dd>
  </dl>
  <img class="detail-mask" src="${resolve(maskUrl)}" alt="mask" />
  <div class="compare" style="--reveal:${percent}%">
    <img class="compare-before" src="${resolve(entry.input_image.url)}" alt="before" />
    <img class="compare-after" src="${resolve(entry.output_image.url)}" alt="after"
         style="clip-path: inset(0 ${100 - percent}% 0 0)" />
  </div>
</aside>`;
}

export function renderToast(message: string, stage: string | null = null): string {
    const suffix = stage ? ` <span class="stage">[stage: ${escapeHtml(stage)}]</span>` : "";
    return `<div class="toast toast-error" role="alert">${escapeHtml(message)}${suffix}</div>`;
}

export function renderCurrentImage(view: SessionView, resolve: UrlResolver): string {
    return `<img class="current-image" src="${resolve(view.currentImage.url)}"
     alt="current image" data-hash="${view.currentImage.hash}" />`;
}
