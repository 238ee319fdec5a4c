/** Parsing for the daemon's server-sent-events frames.
 *
 * The dashboard holds no state across reloads except the event cursor;
 * `nextCursor` advances it monotonically.
 */

import type { ApiEvent } from "./api.js";

export function parseSseFrames(text: string): ApiEvent[] {
  const events: ApiEvent[] = [];
  for (const frame of text.split("\n\n")) {
    if (!frame.trim()) continue;
    let data: string | null = null;
    for (const line of frame.split("\n")) {
      if (line.startsWith("data: ")) {
        data = line.slice("data: ".length);
      }
    }
    if (data === null) continue;
    try {
      events.push(JSON.parse(data) as ApiEvent);
    } catch {
      /* skip malformed frames; the cursor never advances past them */
    }
  }
  return events;
}

export function nextCursor(events: ApiEvent[], previous: number): number {
  return events.reduce((cursor, event) => Math.max(cursor, event.seq), previous);
}
