/** Pure HTML renderers; all interactivity is wired by main.ts via data attributes. */

import type { InstancePage, InstanceSummary, ServiceConfig, SimilarResponse } from "./types.js";
import type { ListRoute } from "./state.js";
import { formatHash, pageCount, withPage } from "./state.js";

export function escapeHtml(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;")
    .replace(/'/g, "&#39;");
}

export function statusBadge(status: string): string {
  return `<span class="badge status-${escapeHtml(status)}">${escapeHtml(status)}</span>`;
}

export function scoreBar(score: number, theta: number): string {
  const width = Math.min(100, Math.max(0, score));
  const marker = Math.min(100, Math.max(0, theta));
  const over = score > theta ? "over" : "under";
  return (
    `<div class="scorebar ${over}" title="dissimilarity ${score.toFixed(1)}, theta ${theta}">` +
    `<div class="fill" style="width:${width.toFixed(1)}%"></div>` +
    `<div class="theta" style="left:${marker.toFixed(1)}%"></div>` +
    `</div>`
  );
}

/** Both heatmaps render through one class so their display size is identical. */
export function heatmapPair(instance: InstanceSummary, size: "thumb" | "full"): string {
  const cell = (url: string | undefined, label: string) =>
    `<figure class="heat ${size}">` +
    (url
      ? `<img class="heatimg ${size}" src="${escapeHtml(url)}" alt="${label}">`
      : `<div class="heatimg ${size} missing">no map</div>`) +
    `<figcaption>${label}</figcaption></figure>`;
  return (
    `<div class="pair">` +
    cell(instance.rf_cam_url, "RF-CAM") +
    cell(instance.grad_cam_url, "Grad-CAM") +
    `</div>`
  );
}

export function cardHtml(instance: InstanceSummary, theta: number): string {
  return (
    `<article class="card" data-instance="${escapeHtml(instance.instance_id)}">` +
    `<header><code>${escapeHtml(instance.instance_id)}</code>` +
    `${statusBadge(instance.status)}${instance.flagged ? '<span class="badge flag">flagged</span>' : ""}</header>` +
    heatmapPair(instance, "thumb") +
    `<div class="meta">` +
    `<span>${escapeHtml(instance.class_name)}</span>` +
    `<span>score ${instance.dissimilarity.toFixed(1)}</span>` +
    `<span>feature ${instance.top_feature}</span>` +
    `</div>` +
    scoreBar(instance.dissimilarity, theta) +
    `</article>`
  );
}

export function filterBarHtml(route: ListRoute, config: ServiceConfig): string {
  const statuses = ["", "flagged", ...config.statuses];
  const statusOptions = statuses
    .map((status) => {
      const label = status === "" ? "all statuses" : status;
      const selected = route.status === status ? " selected" : "";
      return `<option value="${status}"${selected}>${label}</option>`;
    })
    .join("");
  const classOptions = ["<option value=''>all classes</option>"]
    .concat(
      config.class_names.map((name, index) => {
        const selected = route.classIndex === index ? " selected" : "";
        return `<option value="${index}"${selected}>${escapeHtml(name)}</option>`;
      }),
    )
    .join("");
  return (
    `<div class="filters">` +
    `<label>status <select id="filter-status">${statusOptions}</select></label>` +
    `<label>class <select id="filter-class">${classOptions}</select></label>` +
    `</div>`
  );
}

export function paginationHtml(route: ListRoute, page: InstancePage): string {
  const pages = pageCount(page.total, page.page_size);
  const prev = route.page > 1 ? formatHash(withPage(route, route.page - 1)) : null;
  const next = route.page < pages ? formatHash(withPage(route, route.page + 1)) : null;
  return (
    `<nav class="pagination">` +
    (prev ? `<a href="${prev}">previous</a>` : `<span class="dim">previous</span>`) +
    `<span>page ${route.page} of ${pages} (${page.total} instances)</span>` +
    (next ? `<a href="${next}">next</a>` : `<span class="dim">next</span>`) +
    `</nav>`
  );
}

export function listHtml(route: ListRoute, page: InstancePage, config: ServiceConfig): string {
  const cards = page.items.map((item) => cardHtml(item, config.theta)).join("");
  const body = page.items.length
    ? `<section class="grid">${cards}</section>`
    : `<p class="empty">No instances match the current filter.</p>`;
  return filterBarHtml(route, config) + body + paginationHtml(route, page);
}

export function compareHtml(instance: InstanceSummary, config: ServiceConfig): string {
  const decidable = instance.status === "pending" || instance.status === "auto_flagged";
  const buttons = decidable
    ? `<div class="decision">` +
      `<input id="note" type="text" placeholder="optional note">` +
      `<button id="confirm" data-decision="confirm">Confirm spurious</button>` +
      `<button id="reject" data-decision="reject">Reject</button>` +
      `</div>`
    : `<p class="decided">Decision recorded: ${statusBadge(instance.status)}</p>`;
  const warning = instance.warning
    ? `<p class="warning">${escapeHtml(instance.warning)}</p>`
    : "";
  return (
    `<section class="compare" data-instance="${escapeHtml(instance.instance_id)}">` +
    `<header><a href="#/list">&larr; back</a>` +
    `<h2><code>${escapeHtml(instance.instance_id)}</code></h2>` +
    `${statusBadge(instance.status)}${instance.flagged ? '<span class="badge flag">flagged</span>' : ""}</header>` +
    `<p class="meta">predicted <strong>${escapeHtml(instance.class_name)}</strong>` +
    ` (class ${instance.predicted_class}, true ${instance.true_class})` +
    ` &middot; dissimilarity <strong>${instance.dissimilarity.toFixed(2)}</strong>` +
    ` vs theta ${config.theta}` +
    ` &middot; top neural feature <strong>${instance.top_feature}</strong></p>` +
    scoreBar(instance.dissimilarity, config.theta) +
    warning +
    heatmapPair(instance, "full") +
    buttons +
    `<div id="decision-notice"></div>` +
    `<section id="similar"><h3>Similar instances by feature ${instance.top_feature}</h3>` +
    `<div id="gallery" class="gallery"><p class="dim">loading&hellip;</p></div></section>` +
    `</section>`
  );
}

export function autoFlagNoticeHtml(ids: string[]): string {
  if (!ids.length) {
    return `<p class="notice">Confirmed. No pending similar instances to auto-flag.</p>`;
  }
  const links = ids
    .map((id) => `<a href="#/instance/${encodeURIComponent(id)}"><code>${escapeHtml(id)}</code></a>`)
    .join(", ");
  return `<p class="notice">${ids.length} similar instances flagged: ${links}</p>`;
}

export function conflictNoticeHtml(detail: string): string {
  return `<p class="notice conflict">Not applied: ${escapeHtml(detail)}</p>`;
}

export function galleryHtml(similar: SimilarResponse): string {
  if (!similar.items.length) {
    return `<p class="empty">No similar instances.</p>`;
  }
  return similar.items
    .map(
      (item) =>
        `<a class="gallery-item" href="#/instance/${encodeURIComponent(item.instance_id)}">` +
        (item.grad_cam_url
          ? `<img class="heatimg thumb" src="${escapeHtml(item.grad_cam_url)}" alt="Grad-CAM ${escapeHtml(item.instance_id)}">`
          : `<div class="heatimg thumb missing">no map</div>`) +
        `<div class="meta"><code>${escapeHtml(item.instance_id)}</code>` +
        `<span>activation ${item.activation.toFixed(3)}</span>${statusBadge(item.status)}</div>` +
        `</a>`,
    )
    .join("");
}

export function bannerHtml(message: string): string {
  return (
    `<div class="banner">` +
    `<span>${escapeHtml(message)}</span>` +
    `<button id="retry">retry</button>` +
    `</div>`
  );
}
