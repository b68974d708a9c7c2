/** Route + filter state, derived entirely from the URL hash (no client truth). */

export interface ListRoute {
  view: "list";
  status: string; // "" = all
  classIndex?: number;
  page: number;
}

export interface InstanceRoute {
  view: "instance";
  id: string;
}

export type Route = ListRoute | InstanceRoute;

export const DEFAULT_ROUTE: ListRoute = { view: "list", status: "", page: 1 };

export function parseHash(hash: string): Route {
  const clean = hash.replace(/^#\/?/, "");
  if (clean.startsWith("instance/")) {
    const id = decodeURIComponent(clean.slice("instance/".length));
    if (id) return { view: "instance", id };
  }
  const [path, query = ""] = clean.split("?");
  if (path !== "" && path !== "list") return { ...DEFAULT_ROUTE };
  const params = new URLSearchParams(query);
  const route: ListRoute = { ...DEFAULT_ROUTE };
  const status = params.get("status");
  if (status) route.status = status;
  const cls = params.get("class");
  if (cls !== null && cls !== "" && !Number.isNaN(Number(cls))) {
    route.classIndex = Number(cls);
  }
  const page = Number(params.get("page") ?? "1");
  route.page = Number.isInteger(page) && page >= 1 ? page : 1;
  return route;
}

export function formatHash(route: Route): string {
  if (route.view === "instance") {
    return `#/instance/${encodeURIComponent(route.id)}`;
  }
  const params = new URLSearchParams();
  if (route.status) params.set("status", route.status);
  if (route.classIndex !== undefined) params.set("class", String(route.classIndex));
  if (route.page > 1) params.set("page", String(route.page));
  const query = params.toString();
  return query ? `#/list?${query}` : "#/list";
}

export function withStatus(route: ListRoute, status: string): ListRoute {
  return { ...route, status, page: 1 };
}

export function withClass(route: ListRoute, classIndex: number | undefined): ListRoute {
  return { ...route, classIndex, page: 1 };
}

export function withPage(route: ListRoute, page: number): ListRoute {
  return { ...route, page: Math.max(1, page) };
}

export function pageCount(total: number, pageSize: number): number {
  return Math.max(1, Math.ceil(total / pageSize));
}
