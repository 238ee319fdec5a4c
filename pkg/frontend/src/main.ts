/** DOM shell for the dashboard.
 *
 * The page is stateless apart from the event cursor: every refresh re-fetches
 * from the daemon and re-renders the panels from scratch. The bearer token is
 * taken from the URL fragment (#token=...), which never reaches the server.
 */

import { ApiClient, ApiError } from "./api.js";
import type { ApiEvent } from "./api.js";
import { nextCursor, parseSseFrames } from "./sse.js";
import {
  renderAlerts,
  renderHidden,
  renderInbox,
  renderPairs,
  validatePolicy,
} from "./views.js";

const POLL_WAIT_SECONDS = 10;
const MIN_POLL_INTERVAL_MS = 1000;

function tokenFromHash(hash: string): string | null {
  const match = /#token=([0-9a-f]+)/.exec(hash);
  return match ? match[1] : null;
}

function panel(id: string): HTMLElement {
  const el = document.getElementById(id);
  if (!el) throw new Error(`missing panel #${id}`);
  return el;
}

async function refreshAll(api: ApiClient, alerts: ApiEvent[]): Promise<void> {
  const pairs = await api.listPairs();
  panel("pairs").innerHTML = renderPairs(pairs);
  panel("inbox").innerHTML = renderInbox(await api.inboundRequests());

  const hiddenHtml: string[] = [];
  for (const pair of pairs) {
    if (pair.hidden_count > 0) {
      hiddenHtml.push(
        `<h3><code>${pair.prot_path}</code></h3>` +
          renderHidden(pair.id, await api.hiddenEntries(pair.id)),
      );
    }
  }
  panel("hidden").innerHTML =
    hiddenHtml.join("\n") || `<p class="empty">Nothing hidden in any pair.</p>`;
  panel("alerts").innerHTML = renderAlerts(alerts);
}

function showStatus(text: string, isError = false): void {
  const el = panel("status");
  el.textContent = text;
  el.className = isError ? "status error" : "status";
}

async function handleAction(
  api: ApiClient,
  target: HTMLElement,
  alerts: ApiEvent[],
): Promise<void> {
  const action = target.dataset.action;
  try {
    if (action === "approve" || action === "deny") {
      const id = target.dataset.requestId!;
      const result =
        action === "approve" ? await api.approveRequest(id) : await api.denyRequest(id);
      showStatus(`request ${id.slice(0, 12)}...: ${result.decision}`);
    } else if (action === "restore") {
      const version = target.dataset.version;
      const result = await api.restore(
        target.dataset.pairId!,
        target.dataset.path!,
        version === undefined ? undefined : Number(version),
      );
      showStatus(`restored ${target.dataset.path} (version ${result.version_id})`);
    } else {
      return;
    }
    await refreshAll(api, alerts);
  } catch (err) {
    showStatus(err instanceof ApiError ? err.message : String(err), true);
  }
}

async function pollLoop(api: ApiClient, alerts: ApiEvent[]): Promise<void> {
  let cursor = 0;
  for (;;) {
    const started = Date.now();
    try {
      const events = parseSseFrames(await api.pollEvents(cursor, POLL_WAIT_SECONDS));
      if (events.length > 0) {
        cursor = nextCursor(events, cursor);
        alerts.push(...events);
        await refreshAll(api, alerts);
      }
    } catch (err) {
      showStatus(err instanceof ApiError ? err.message : String(err), true);
    }
    const elapsed = Date.now() - started;
    if (elapsed < MIN_POLL_INTERVAL_MS) {
      await new Promise((r) => setTimeout(r, MIN_POLL_INTERVAL_MS - elapsed));
    }
  }
}

function wirePolicyForm(api: ApiClient): void {
  const form = document.getElementById("policy-form") as HTMLFormElement | null;
  if (!form) return;
  form.addEventListener("submit", async (ev) => {
    ev.preventDefault();
    const data = new FormData(form);
    const policy = validatePolicy(String(data.get("mode")), String(data.get("keep")));
    if (typeof policy === "string") {
      showStatus(policy, true);
      return;
    }
    const path = String(data.get("path") || "");
    try {
      await api.putPolicy(String(data.get("pair_id")), policy, path || undefined);
      showStatus("policy updated");
    } catch (err) {
      showStatus(err instanceof ApiError ? err.message : String(err), true);
    }
  });
}

export function start(): void {
  const token = tokenFromHash(location.hash);
  if (!token) {
    document.body.innerHTML =
      `<p class="status error">Missing token. Open the link printed by the daemon ` +
      `(it ends in <code>#token=...</code>).</p>`;
    return;
  }
  const api = new ApiClient("", token);
  const alerts: ApiEvent[] = [];
  document.addEventListener("click", (ev) => {
    const target = ev.target;
    if (target instanceof HTMLElement && target.dataset.action) {
      void handleAction(api, target, alerts);
    }
  });
  wirePolicyForm(api);
  void refreshAll(api, alerts).catch((err) =>
    showStatus(err instanceof ApiError ? err.message : String(err), true),
  );
  void pollLoop(api, alerts);
}

if (typeof document !== "undefined" && document.getElementById("pairs")) {
  start();
}
