/** Bootstraps the console: hash routing, data fetching, event wiring. */

import { ApiClient, ApiError } from "./api.js";
import type { Route } from "./state.js";
import { DEFAULT_ROUTE, formatHash, parseHash, withClass, withStatus } from "./state.js";
import {
  autoFlagNoticeHtml,
  bannerHtml,
  compareHtml,
  conflictNoticeHtml,
  galleryHtml,
  listHtml,
} from "./views.js";
import type { ServiceConfig } from "./types.js";

const api = new ApiClient();
const root = document.getElementById("app") as HTMLElement;
let config: ServiceConfig | null = null;
let decisionInFlight = false; // client-side debounce; server 409 is the backstop

async function ensureConfig(): Promise<ServiceConfig> {
  if (config === null) {
    config = await api.config();
  }
  return config;
}

function navigate(route: Route): void {
  window.location.hash = formatHash(route);
}

async function renderList(route: Route & { view: "list" }): Promise<void> {
  const cfg = await ensureConfig();
  const page = await api.instances({
    status: route.status || undefined,
    classIndex: route.classIndex,
    page: route.page,
  });
  root.innerHTML = listHtml(route, page, cfg);

  const statusSelect = document.getElementById("filter-status") as HTMLSelectElement | null;
  statusSelect?.addEventListener("change", () => navigate(withStatus(route, statusSelect.value)));
  const classSelect = document.getElementById("filter-class") as HTMLSelectElement | null;
  classSelect?.addEventListener("change", () => {
    const value = classSelect.value === "" ? undefined : Number(classSelect.value);
    navigate(withClass(route, value));
  });
  for (const card of Array.from(root.querySelectorAll<HTMLElement>(".card[data-instance]"))) {
    card.addEventListener("click", () => {
      navigate({ view: "instance", id: card.dataset.instance as string });
    });
  }
}

async function loadGallery(instanceId: string): Promise<void> {
  const gallery = document.getElementById("gallery");
  if (!gallery) return;
  try {
    const similar = await api.similar(instanceId, 4);
    gallery.innerHTML = galleryHtml(similar);
  } catch (error) {
    gallery.innerHTML = `<p class="empty">similar instances unavailable: ${
      error instanceof ApiError ? error.detail : "service error"
    }</p>`;
  }
}

async function renderInstance(route: Route & { view: "instance" }): Promise<void> {
  const cfg = await ensureConfig();
  const instance = await api.instance(route.id);
  root.innerHTML = compareHtml(instance, cfg);

  const notice = () => document.getElementById("decision-notice") as HTMLElement;
  for (const button of Array.from(root.querySelectorAll<HTMLButtonElement>("button[data-decision]"))) {
    button.addEventListener("click", async () => {
      if (decisionInFlight) return;
      decisionInFlight = true;
      button.disabled = true;
      const note = (document.getElementById("note") as HTMLInputElement | null)?.value;
      try {
        const decision = button.dataset.decision as "confirm" | "reject";
        const response = await api.review(route.id, decision, note);
        if (decision === "confirm") {
          notice().innerHTML = autoFlagNoticeHtml(response.auto_flagged);
        }
        // re-render from the server's echo: no client-side source of truth
        const updated = await api.instance(route.id);
        const saved = notice().innerHTML;
        root.innerHTML = compareHtml(updated, cfg);
        notice().innerHTML = saved;
        await loadGallery(route.id);
      } catch (error) {
        if (error instanceof ApiError && error.isConflict) {
          notice().innerHTML = conflictNoticeHtml(error.detail);
        } else {
          throw error;
        }
      } finally {
        decisionInFlight = false;
      }
    });
  }
  await loadGallery(route.id);
}

async function render(): Promise<void> {
  const route = parseHash(window.location.hash || formatHash(DEFAULT_ROUTE));
  try {
    if (route.view === "list") {
      await renderList(route);
    } else {
      await renderInstance(route);
    }
  } catch (error) {
    const reachable = await api.health();
    const message = reachable
      ? `Request failed: ${error instanceof Error ? error.message : String(error)}`
      : "Review service unreachable.";
    root.innerHTML = bannerHtml(message);
    document.getElementById("retry")?.addEventListener("click", () => void render());
  }
}

window.addEventListener("hashchange", () => void render());
void render();
