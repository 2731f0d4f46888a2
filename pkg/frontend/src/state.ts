// View state is rebuilt from GET /sessions/{id} after every mutation:
// the server is the single source of truth, so a page reload reconstructs
// exactly the same view.

import type { SessionResponse, SessionView } from "./types.js";

export function sessionViewFrom(
    sessionId: string,
    response: SessionResponse,
): SessionView {
    return {
        sessionId,
        timeline: response.timeline,
        pending: response.pending,
        currentImage: response.current_image,
    };
}
