/** Pure HTML renderers for the dashboard panels.
 *
 * Each function maps API data to an HTML string with no DOM access, so the
 * views are testable in plain node and reusable from the integration driver.
 */

import type { ApiEvent, HiddenEntry, InboundRequest, Pair, Policy } from "./api.js";

export function escapeHtml(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;")
    .replace(/'/g, "&#39;");
}

export function renderPairs(pairs: Pair[]): string {
  if (pairs.length === 0) {
    return `<p class="empty">No folder pairs yet. Create one with the CLI: <code>protbox pair add</code>.</p>`;
  }
  const rows = pairs
    .map(
      (p) => `<tr data-pair-id="${escapeHtml(p.id)}">
  <td><code>${escapeHtml(p.prot_path)}</code></td>
  <td><code>${escapeHtml(p.shared_path)}</code></td>
  <td><span class="state state-${p.state.toLowerCase()}">${escapeHtml(p.state)}</span></td>
  <td>${p.entry_count}</td>
  <td>${p.hidden_count}</td>
</tr>`,
    )
    .join("\n");
  return `<table class="pairs">
<thead><tr><th>Prot folder</th><th>Shared folder</th><th>State</th><th>Files</th><th>Hidden</th></tr></thead>
<tbody>
${rows}
</tbody>
</table>`;
}

export function renderInbox(requests: InboundRequest[]): string {
  if (requests.length === 0) {
    return `<p class="empty">No pending key requests.</p>`;
  }
  const rows = requests
    .map(
      (r) => `<div class="request" data-request-id="${escapeHtml(r.id)}">
  <div class="request-subject">${escapeHtml(r.subject)}</div>
  <div class="request-fingerprint"><code>${escapeHtml(r.fingerprint)}</code></div>
  <div class="request-folder"><code>${escapeHtml(r.shared_path)}</code></div>
  <div class="request-actions">
    <button data-action="approve" data-request-id="${escapeHtml(r.id)}">Approve</button>
    <button data-action="deny" data-request-id="${escapeHtml(r.id)}">Deny</button>
  </div>
</div>`,
    )
    .join("\n");
  return `<div class="inbox">\n${rows}\n</div>`;
}

export function renderHidden(pairId: string, entries: HiddenEntry[]): string {
  if (entries.length === 0) {
    return `<p class="empty">Nothing hidden in this pair.</p>`;
  }
  const rows = entries
    .map((e) => {
      const versions = e.versions
        .map(
          (v) =>
            `<li>version ${v.version_id} (${v.length} bytes, ${escapeHtml(v.captured_at)})
  <button data-action="restore" data-pair-id="${escapeHtml(pairId)}" data-path="${escapeHtml(e.path)}" data-version="${v.version_id}">Restore</button></li>`,
        )
        .join("\n");
      const latest =
        e.versions.length > 0
          ? `<button data-action="restore" data-pair-id="${escapeHtml(pairId)}" data-path="${escapeHtml(e.path)}">Restore latest</button>`
          : `<span class="no-backup">no backup kept</span>`;
      return `<div class="hidden-entry" data-path="${escapeHtml(e.path)}">
  <div class="hidden-path"><code>${escapeHtml(e.path)}</code> <span class="kind">${escapeHtml(e.kind)}</span> ${latest}</div>
  <ul class="versions">\n${versions}\n</ul>
</div>`;
    })
    .join("\n");
  return `<div class="hidden-list">\n${rows}\n</div>`;
}

const ALERT_KINDS = new Set([
  "Quarantine",
  "Conflict",
  "PairSuspended",
  "DeletionBackedUp",
  "NeedsBackupDecision",
  "KeyInstalled",
  "KeyRequestInbound",
]);

export function isAlert(event: ApiEvent): boolean {
  return ALERT_KINDS.has(event.kind);
}

export function renderAlerts(events: ApiEvent[], limit = 50): string {
  const alerts = events.filter(isAlert).slice(-limit).reverse();
  if (alerts.length === 0) {
    return `<p class="empty">No alerts.</p>`;
  }
  const rows = alerts
    .map((e) => {
      const detail = Object.entries(e.payload)
        .map(([k, v]) => `${escapeHtml(k)}=${escapeHtml(String(v))}`)
        .join(" ");
      return `<li class="alert alert-${escapeHtml(e.kind.toLowerCase())}" data-seq="${e.seq}">
  <span class="alert-kind">${escapeHtml(e.kind)}</span> <span class="alert-detail">${detail}</span>
</li>`;
    })
    .join("\n");
  return `<ol class="alerts">\n${rows}\n</ol>`;
}

/** Client-side check mirroring the server's policy rules. */
export function validatePolicy(mode: string, keep: string): Policy | string {
  if (mode === "never" || mode === "ask") {
    return { mode };
  }
  if (mode === "keep") {
    const n = Number(keep);
    if (!Number.isInteger(n) || n < 1) {
      return "keep must be an integer of at least 1";
    }
    return { mode, keep: n };
  }
  return `unknown policy mode: ${mode}`;
}
