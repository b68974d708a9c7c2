/** Shapes of the review service's JSON API (consumed verbatim). */

export type Status = "pending" | "confirmed" | "rejected" | "diagnostic" | "auto_flagged";

export interface InstanceSummary {
  instance_id: string;
  predicted_class: number;
  class_name: string;
  true_class: number;
  dissimilarity: number;
  flagged: boolean;
  status: Status;
  top_feature: number;
  warning: string | null;
  rf_cam_url?: string;
  grad_cam_url?: string;
}

export interface InstancePage {
  items: InstanceSummary[];
  total: number;
  page: number;
  page_size: number;
}

export interface ServiceConfig {
  theta: number;
  mask_threshold: number;
  auto_flag_top_n: number;
  class_names: string[];
  statuses: Status[];
}

export interface ReviewResponse {
  record: InstanceSummary;
  auto_flagged: string[];
}

export interface SimilarItem extends InstanceSummary {
  activation: number;
}

export interface SimilarResponse {
  query_instance: string;
  feature: number;
  class_index: number;
  items: SimilarItem[];
}

export interface Summary {
  total: number;
  flagged: number;
  by_status: Record<Status, number>;
  per_class: { class_index: number; class_name: string; total: number; flagged: number; confirmed: number }[];
  groups: Record<string, string[]>;
}
