// Wire types mirroring the gateway's JSON responses. The UI renders
// exclusively from these; it holds no editing logic of its own.

export interface ArtifactRef {
    hash: string;
    url: string;
}

export interface MaskRef {
    hash: string;
    url: string;
    overlay_url: string;
}

export interface RoundSummary {
    round: number;
    instruction: string;
    mode: string;
    selection_source: string;
    localization_prompt: string;
    modification_plan: string;
    input_image: ArtifactRef;
    output_image: ArtifactRef;
    mask: MaskRef;
}

export interface PendingCandidate {
    position: number;
    candidate_index: number;
    score: number | null;
    seed: number;
    image: ArtifactRef;
}

export interface PendingChoice {
    instruction: string;
    candidates: PendingCandidate[];
}

export interface SessionResponse {
    session: Record<string, unknown>;
    timeline: RoundSummary[];
    pending: PendingChoice | null;
    current_image: ArtifactRef;
}

export interface EditResponse {
    record?: RoundSummary;
    pending?: PendingChoice;
    rounds: number;
}

export interface SessionView {
    sessionId: string;
    timeline: RoundSummary[];
    pending: PendingChoice | null;
    currentImage: ArtifactRef;
}
